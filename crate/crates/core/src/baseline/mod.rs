//! Discrete-token baseline: patches are vector-quantized with a k-means
//! codebook and the same transformer is trained with the LM loss alone,
//! under plain causal attention.

mod codebook;

pub use codebook::{fit_codebook, Codebook};

use serde::Serialize;

use crate::config::hash_json;
use crate::data::vocab::{BOI, EOI};
use crate::data::{patches_per_image, Element, Image, MixedSequence, Vocab};
use crate::error::{Error, Result};
use crate::infer::{next_token_logits, sample_index, GenerationParams};
use crate::model::TransfusionModel;
use crate::patch::{patchify, unpatchify};
use crate::rng::{stream, Purpose};
use crate::tensor::Real;
use crate::train::TrainConfig;

/// Vocabulary id of codebook entry `index`.
pub fn image_token(index: usize) -> u32 {
    Vocab::text_size() + index as u32
}

/// Every patch of every image in `sequences`, in order.
pub fn collect_patches(sequences: &[MixedSequence]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    for seq in sequences {
        for img in &seq.images {
            out.extend(patchify(img, seq.patch_size)?);
        }
    }
    Ok(out)
}

/// Replaces each image span with its `n` codebook tokens; BOI/EOI stay.
pub fn discretize(seq: &MixedSequence, codebook: &Codebook) -> Result<MixedSequence> {
    let mut out = MixedSequence::empty(seq.patch_size);
    let patches: Vec<Vec<Vec<f32>>> =
        seq.images.iter().map(|img| patchify(img, seq.patch_size)).collect::<Result<_>>()?;
    for e in &seq.elements {
        match *e {
            Element::Token(id) => out.push_token(id),
            Element::ImageRef { image, patch } => out.push_token(image_token(codebook.quantize(&patches[image][patch]))),
        }
    }
    Ok(out)
}

/// The baseline counterpart of a Transfusion training config: same data
/// seed, transformer, optimizer and schedule; vocabulary extended by the
/// codebook; causal attention.
pub fn baseline_config(config: &TrainConfig, codebook_size: usize) -> TrainConfig {
    let mut out = config.clone();
    out.causal_only = true;
    out.model.vocab_size = Vocab::with_extra(codebook_size as u32).size();
    out
}

/// The settings two runs must share to be a controlled comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParityKey {
    pub data_seed: u64,
    pub train_seed: u64,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub patch_size: usize,
    pub image_hw: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl ParityKey {
    pub fn new(config: &TrainConfig, data_seed: u64) -> Self {
        let m = &config.model;
        Self {
            data_seed,
            train_seed: config.seed,
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            ffn_hidden: m.ffn_hidden,
            patch_size: m.codec.patch_size,
            image_hw: m.codec.image_hw,
            lr_peak: config.lr_peak,
            lr_final: config.lr_final,
            warmup_steps: config.warmup_steps,
            total_steps: config.total_steps,
            batch_size: config.batch_size,
            betas: (config.beta1, config.beta2),
            adam_eps: config.adam_eps,
            weight_decay: config.weight_decay,
            grad_clip: config.grad_clip,
        }
    }

    pub fn hash(&self) -> Result<String> {
        hash_json(self)
    }
}

/// Samples `n` codebook tokens after `prefix` (which must end with `BOI`)
/// and decodes them to pixels. Only image tokens are eligible.
pub fn generate_image<F: Real>(
    model: &TransfusionModel<F>,
    prefix: &MixedSequence,
    codebook: &Codebook,
    params: &GenerationParams,
    stream_index: u64,
) -> Result<(Image, MixedSequence)> {
    if prefix.elements.last() != Some(&Element::Token(BOI)) {
        return Err(Error::PrefixNotAtBoi);
    }
    let cfg = &model.config.codec;
    let n = patches_per_image(cfg.image_hw, cfg.image_hw, cfg.patch_size)?;
    let first = image_token(0) as usize;
    let mut rng = stream(params.seed, Purpose::Sampling, stream_index);
    let mut seq = prefix.clone();
    let mut patches = Vec::with_capacity(n);
    for _ in 0..n {
        let logits = next_token_logits(model, &seq, true)?;
        let idx = sample_index(&logits[first..first + codebook.len()], params.temperature, params.top_p, &mut rng);
        seq.push_token(image_token(idx));
        patches.push(codebook.centroid(idx).to_vec());
    }
    seq.push_token(EOI);
    let image = unpatchify(&patches, cfg.patch_size, cfg.channels, cfg.image_hw, cfg.image_hw)?;
    Ok((image, seq))
}
