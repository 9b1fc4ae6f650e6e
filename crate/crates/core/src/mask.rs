//! Attention mask: causal everywhere, plus bidirectional blocks over the
//! patches of each individual image.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::data::vocab::PAD;
use crate::data::{Element, MixedSequence, Span};
use crate::error::{Error, Result};

/// Row-major `len x len` allow matrix; row = query, column = key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    len: usize,
    allow: Arc<[bool]>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.len + key]
    }

    pub fn as_shared(&self) -> &Arc<[bool]> {
        &self.allow
    }

    /// `0`/`1` grid, one row per query position.
    pub fn to_text_grid(&self) -> String {
        let mut out = String::with_capacity(self.len * (self.len + 1));
        for i in 0..self.len {
            for j in 0..self.len {
                out.push(if self.allowed(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// Grid with a header column naming each position's element.
    pub fn annotated_grid(&self, labels: &[String]) -> String {
        let width = labels.iter().map(|l| l.len()).max().unwrap_or(0);
        let mut out = String::new();
        for i in 0..self.len {
            let _ = write!(out, "{:>width$} ", labels.get(i).map(String::as_str).unwrap_or(""));
            for j in 0..self.len {
                out.push(if self.allowed(i, j) { '1' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the mask for a sequence with the given image spans.
///
/// `allow[i][j] = j <= i || (!causal_only && i, j in the same span)`, and
/// PAD positions neither attend nor are attended to. BOI/EOI sit outside
/// the spans and so are purely causal.
pub fn build_mask(elements: &[Element], spans: &[Span], causal_only: bool) -> Result<AttentionMask> {
    let len = elements.len();
    let mut owner: Vec<Option<usize>> = vec![None; len];
    for (s, span) in spans.iter().enumerate() {
        if span.end() > len {
            return Err(Error::SpanOutOfBounds { start: span.start, len: span.len, total: len });
        }
        for pos in span.positions() {
            if owner[pos].is_some() {
                return Err(Error::OverlappingSpans(pos));
            }
            owner[pos] = Some(s);
        }
    }
    let pad: Vec<bool> = elements.iter().map(|e| e.is_token(PAD)).collect();
    let mut allow = vec![false; len * len];
    for i in 0..len {
        if pad[i] {
            continue;
        }
        for j in 0..len {
            if pad[j] {
                continue;
            }
            let same_image = !causal_only && owner[i].is_some() && owner[i] == owner[j];
            allow[i * len + j] = j <= i || same_image;
        }
    }
    Ok(AttentionMask { len, allow: allow.into() })
}

impl MixedSequence {
    pub fn attention_mask(&self, causal_only: bool) -> Result<AttentionMask> {
        build_mask(&self.elements, &self.spans, causal_only)
    }
}
