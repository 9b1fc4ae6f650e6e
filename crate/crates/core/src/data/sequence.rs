use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, BOI, BOS, EOI, EOS, PAD};
use super::Image;
use crate::error::{Error, Result};

/// One position of a mixed-modal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Element {
    Token(u32),
    /// Patch `patch` of image `image` in the sequence's image table.
    ImageRef { image: usize, patch: usize },
}

impl Element {
    pub fn token(&self) -> Option<u32> {
        match *self {
            Element::Token(t) => Some(t),
            Element::ImageRef { .. } => None,
        }
    }

    pub fn is_token(&self, id: u32) -> bool {
        self.token() == Some(id)
    }

    pub fn is_patch(&self) -> bool {
        matches!(self, Element::ImageRef { .. })
    }
}

/// Whether an image's caption precedes or follows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    CaptionFirst,
    ImageFirst,
}

/// Contiguous run of patch elements belonging to one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos < self.end()
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Input segment for [`build_sequence`].
#[derive(Clone, Debug)]
pub enum Segment {
    Text(String),
    Image(Image),
}

/// Ordered discrete tokens and image patch runs, bracketed by BOS/EOS, with
/// each image bracketed by BOI/EOI.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedSequence {
    pub elements: Vec<Element>,
    pub images: Vec<Image>,
    pub spans: Vec<Span>,
    pub layouts: Vec<Layout>,
    pub patch_size: usize,
}

pub fn patches_per_image(height: usize, width: usize, k: usize) -> Result<usize> {
    for dim in [height, width] {
        if k == 0 || dim % k != 0 {
            return Err(Error::DimensionNotDivisible { dim, patch: k });
        }
    }
    Ok((height / k) * (width / k))
}

/// Builds `[BOS, ..segments.., EOS]`; each image becomes
/// `BOI, (H/k)(W/k) patch refs, EOI`. An image is tagged
/// [`Layout::CaptionFirst`] when text precedes it in the sequence.
pub fn build_sequence(segments: &[Segment], vocab: &Vocab, k: usize) -> Result<MixedSequence> {
    let mut seq = MixedSequence::empty(k);
    seq.elements.push(Element::Token(BOS));
    let mut seen_text = false;
    for seg in segments {
        match seg {
            Segment::Text(s) => {
                let ids = vocab.tokenize(s)?;
                seen_text |= !ids.is_empty();
                seq.elements.extend(ids.into_iter().map(Element::Token));
            }
            Segment::Image(img) => {
                let layout = if seen_text { Layout::CaptionFirst } else { Layout::ImageFirst };
                seq.push_image(img.clone(), layout)?;
            }
        }
    }
    seq.elements.push(Element::Token(EOS));
    Ok(seq)
}

/// Draws [`Layout::CaptionFirst`] with probability `p_caption_first`.
pub fn sample_layout<R: Rng + ?Sized>(rng: &mut R, p_caption_first: f64) -> Layout {
    debug_assert!((0.0..=1.0).contains(&p_caption_first));
    if rng.random::<f64>() < p_caption_first {
        Layout::CaptionFirst
    } else {
        Layout::ImageFirst
    }
}

impl MixedSequence {
    pub fn empty(patch_size: usize) -> Self {
        Self { elements: Vec::new(), images: Vec::new(), spans: Vec::new(), layouts: Vec::new(), patch_size }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn patch_count(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    pub fn push_token(&mut self, id: u32) {
        self.elements.push(Element::Token(id));
    }

    /// Appends `BOI`, the image's patch refs and `EOI`.
    pub fn push_image(&mut self, img: Image, layout: Layout) -> Result<()> {
        self.push_image_open(img, layout)?;
        self.elements.push(Element::Token(EOI));
        Ok(())
    }

    /// Appends `BOI` and the patch refs, without the closing `EOI`.
    pub fn push_image_open(&mut self, img: Image, layout: Layout) -> Result<()> {
        let n = patches_per_image(img.height, img.width, self.patch_size)?;
        self.elements.push(Element::Token(BOI));
        let index = self.images.len();
        let start = self.elements.len();
        self.elements.extend((0..n).map(|patch| Element::ImageRef { image: index, patch }));
        self.spans.push(Span { start, len: n });
        self.images.push(img);
        self.layouts.push(layout);
        Ok(())
    }

    /// Appends patch refs for an image whose `BOI` is already the last
    /// element.
    pub fn open_image_after_boi(&mut self, img: Image, layout: Layout) -> Result<()> {
        if self.elements.last() != Some(&Element::Token(BOI)) {
            return Err(Error::PrefixNotAtBoi);
        }
        self.elements.pop();
        self.push_image_open(img, layout)
    }

    /// Pads with `PAD` up to `len` elements.
    pub fn padded(&self, len: usize) -> MixedSequence {
        let mut out = self.clone();
        while out.elements.len() < len {
            out.elements.push(Element::Token(PAD));
        }
        out
    }

    /// Token ids of the discrete elements, in order.
    pub fn tokens(&self) -> Vec<u32> {
        self.elements.iter().filter_map(Element::token).collect()
    }

    pub fn image_of(&self, pos: usize) -> Option<usize> {
        match self.elements.get(pos)? {
            Element::ImageRef { image, .. } => Some(*image),
            Element::Token(_) => None,
        }
    }

    /// Checks bracketing, span density and image shapes.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MalformedSequence(m));
        if self.images.len() != self.spans.len() || self.images.len() != self.layouts.len() {
            return bad("image table, spans and layouts differ in length".into());
        }
        let mut next_image = 0;
        let mut i = 0;
        while i < self.elements.len() {
            match self.elements[i] {
                Element::Token(BOI) => {
                    let Some(span) = self.spans.get(next_image) else {
                        return bad(format!("BOI at {i} without an image"));
                    };
                    if span.start != i + 1 {
                        return bad(format!("image {next_image} does not start after BOI at {i}"));
                    }
                    let img = &self.images[next_image];
                    let n = patches_per_image(img.height, img.width, self.patch_size)?;
                    if span.len != n {
                        return bad(format!("image {next_image} span {} != {n}", span.len));
                    }
                    if !img.in_unit_range() {
                        return bad(format!("image {next_image} has pixels outside [-1,1]"));
                    }
                    for (p, pos) in span.positions().enumerate() {
                        if self.elements.get(pos) != Some(&Element::ImageRef { image: next_image, patch: p }) {
                            return bad(format!("image {next_image} patch {p} missing at {pos}"));
                        }
                    }
                    if self.elements.get(span.end()) != Some(&Element::Token(EOI)) {
                        return bad(format!("image {next_image} not closed by EOI"));
                    }
                    i = span.end() + 1;
                    next_image += 1;
                }
                Element::Token(EOI) => return bad(format!("stray EOI at {i}")),
                Element::ImageRef { .. } => return bad(format!("patch outside a span at {i}")),
                Element::Token(_) => i += 1,
            }
        }
        if next_image != self.images.len() {
            return bad("unreferenced images".into());
        }
        Ok(())
    }
}
