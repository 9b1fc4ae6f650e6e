use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const BOI: u32 = 3;
pub const EOI: u32 = 4;
pub const NUM_RESERVED: u32 = 5;

const FIRST_CHAR: u32 = 0x20;
const LAST_CHAR: u32 = 0x7e;

/// Character-level vocabulary: five reserved markers followed by printable
/// ASCII. An optional block of extra ids (discrete image tokens for the
/// baseline) sits after the characters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    extra: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::text()
    }
}

impl Vocab {
    pub const fn text() -> Self {
        Self { extra: 0 }
    }

    /// Text vocabulary extended by `extra` ids starting at [`Vocab::text_size`].
    pub const fn with_extra(extra: u32) -> Self {
        Self { extra }
    }

    pub const fn text_size() -> u32 {
        NUM_RESERVED + (LAST_CHAR - FIRST_CHAR + 1)
    }

    pub const fn size(&self) -> u32 {
        Self::text_size() + self.extra
    }

    pub const fn extra(&self) -> u32 {
        self.extra
    }

    pub fn is_reserved(id: u32) -> bool {
        id < NUM_RESERVED
    }

    pub fn char_id(c: char) -> Option<u32> {
        let code = c as u32;
        (FIRST_CHAR..=LAST_CHAR).contains(&code).then(|| code - FIRST_CHAR + NUM_RESERVED)
    }

    pub fn id_char(id: u32) -> Option<char> {
        if (NUM_RESERVED..Self::text_size()).contains(&id) {
            char::from_u32(id - NUM_RESERVED + FIRST_CHAR)
        } else {
            None
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| Self::char_id(ch).ok_or(Error::UnmappableCharacter { position, ch }))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter().map(|&id| Self::id_char(id).ok_or(Error::UnknownToken(id))).collect()
    }

    /// Human-readable rendering of any id, including markers.
    pub fn describe(&self, id: u32) -> String {
        match id {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            BOI => "<boi>".into(),
            EOI => "<eoi>".into(),
            _ => match Self::id_char(id) {
                Some(c) => c.to_string(),
                None => format!("<img{}>", id - Self::text_size()),
            },
        }
    }

    /// All printable characters in id order.
    pub fn charset() -> impl Iterator<Item = char> {
        (FIRST_CHAR..=LAST_CHAR).filter_map(char::from_u32)
    }
}
