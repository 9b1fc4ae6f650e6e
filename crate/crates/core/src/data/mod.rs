//! Mixed-modal sequences, the character vocabulary and the synthetic
//! captioned-shape corpus.

pub mod corpus;
mod image;
pub mod scene;
mod sequence;
pub mod vocab;

pub use corpus::{CorpusItem, CorpusSpec};
pub use image::Image;
pub use scene::{Color, PartialSpec, Position, SceneSpec, Shape, Size};
pub use sequence::{build_sequence, patches_per_image, sample_layout, Element, Layout, MixedSequence, Segment, Span};
pub use vocab::Vocab;
