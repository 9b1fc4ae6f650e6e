//! Desk-scale mixed-modal transformer: one model trained with next-token
//! prediction on text and denoising diffusion on image patches.

pub mod baseline;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod infer;
pub mod mask;
pub mod model;
pub mod par;
pub mod patch;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
