//! Loss bookkeeping: which positions feed which objective, and the batch
//! losses and gradients.

use serde::{Deserialize, Serialize};

use super::{ImageInput, TransfusionModel};
use crate::data::vocab::{BOI, PAD};
use crate::data::{Element, Image, MixedSequence};
use crate::diffusion::DiffusionDraw;
use crate::error::{Error, Result};
use crate::mask::build_mask;
use crate::par;
use crate::tensor::{Gradients, Graph, Mat, Real, Var};

/// What the model output at an input position is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositionRole {
    /// Next-token prediction of `target`.
    Lm { target: u32 },
    /// Noise prediction for a patch of image `image`.
    Diffusion { image: usize },
    /// A `BOI` input; its successor is an image patch, so no loss.
    BoiInput,
    Pad,
}

/// Per-position roles over the model input, which is the sequence minus its
/// final non-PAD element (that element is never an input).
///
/// The last patch of an image has `EOI` as successor but is a diffusion
/// position; `EOI` is appended by the sampler and never predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPlan {
    pub input_len: usize,
    pub roles: Vec<PositionRole>,
}

impl LossPlan {
    pub fn new(seq: &MixedSequence) -> Result<Self> {
        let elements = &seq.elements;
        let Some(last) = elements.iter().rposition(|e| *e != Element::Token(PAD)) else {
            return Err(Error::MalformedSequence("sequence has no non-PAD element".into()));
        };
        let input_len = last;
        let mut roles = Vec::with_capacity(elements.len());
        for (i, e) in elements.iter().enumerate() {
            let role = match *e {
                Element::Token(PAD) => PositionRole::Pad,
                _ if i >= input_len => PositionRole::Pad,
                Element::ImageRef { image, .. } => PositionRole::Diffusion { image },
                Element::Token(BOI) => PositionRole::BoiInput,
                Element::Token(_) => match elements[i + 1] {
                    Element::Token(PAD) => PositionRole::Pad,
                    Element::Token(target) => PositionRole::Lm { target },
                    Element::ImageRef { .. } => {
                        return Err(Error::MalformedSequence(format!("patch at {} not preceded by BOI", i + 1)))
                    }
                },
            };
            roles.push(role);
        }
        Ok(Self { input_len, roles })
    }

    pub fn lm_positions(&self) -> (Vec<usize>, Vec<usize>) {
        self.roles
            .iter()
            .enumerate()
            .filter_map(|(i, r)| match r {
                PositionRole::Lm { target } => Some((i, *target as usize)),
                _ => None,
            })
            .unzip()
    }

    pub fn lm_count(&self) -> usize {
        self.roles.iter().filter(|r| matches!(r, PositionRole::Lm { .. })).count()
    }
}

/// Summary of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean NLL per LM target, nats.
    pub lm_loss: f64,
    /// Per-image MSE, averaged over images.
    pub ddpm_loss: f64,
    pub lambda: f64,
    pub total: f64,
    pub text_tokens: usize,
    pub images: usize,
    pub patches: usize,
    /// No LM targets were present; `lm_loss` is 0 by convention.
    pub empty_lm: bool,
}

impl LossReport {
    fn new(nll_sum: f64, text_tokens: usize, mse_sum: f64, images: usize, patches: usize, lambda: f64) -> Self {
        let lm_loss = if text_tokens == 0 { 0.0 } else { nll_sum / text_tokens as f64 };
        let ddpm_loss = if images == 0 { 0.0 } else { mse_sum / images as f64 };
        Self {
            lm_loss,
            ddpm_loss,
            lambda,
            total: transfusion_loss(lm_loss, ddpm_loss, lambda),
            text_tokens,
            images,
            patches,
            empty_lm: text_tokens == 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.lm_loss.is_finite() && self.ddpm_loss.is_finite() && self.total.is_finite()
    }
}

/// Mean NLL over rows where `mask` is set, and the number of such rows.
/// Returns `(0.0, 0)` when nothing is selected.
pub fn lm_loss<F: Real>(logits: &Mat<F>, targets: &[u32], mask: &[bool]) -> (f64, usize) {
    assert_eq!(logits.rows, targets.len());
    assert_eq!(logits.rows, mask.len());
    let mut sum = 0.0;
    let mut count = 0;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        sum += lse - row[t as usize];
        count += 1;
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (sum / count as f64, count)
    }
}

fn image_mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let sq: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sq / a.numel() as f64)
}

/// Per-image mean squared error, averaged over images.
pub fn ddpm_loss(eps_hat: &[Image], eps: &[Image]) -> Result<f64> {
    if eps_hat.len() != eps.len() {
        return Err(Error::ShapeMismatch { expected: vec![eps.len()], actual: vec![eps_hat.len()] });
    }
    if eps.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (a, b) in eps_hat.iter().zip(eps) {
        sum += image_mse(a, b)?;
    }
    Ok(sum / eps.len() as f64)
}

pub fn transfusion_loss(lm: f64, ddpm: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    lm + lambda * ddpm
}

/// A sequence with one diffusion draw per image.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub sequence: MixedSequence,
    pub draws: Vec<DiffusionDraw>,
}

impl TrainingExample {
    /// Pairs a sequence with draws, checking counts and shapes.
    pub fn new(sequence: MixedSequence, draws: Vec<DiffusionDraw>) -> Result<Self> {
        if draws.len() != sequence.images.len() {
            return Err(Error::CountMismatch { expected: sequence.images.len(), actual: draws.len() });
        }
        for (d, img) in draws.iter().zip(&sequence.images) {
            d.x_t.check_same_shape(img)?;
        }
        Ok(Self { sequence, draws })
    }

    /// Every image clean, i.e. no diffusion signal (LM-only evaluation).
    pub fn clean(sequence: MixedSequence) -> Self {
        let draws = sequence.images.iter().map(DiffusionDraw::clean).collect();
        Self { sequence, draws }
    }
}

struct SequenceTerms {
    loss: Option<Var>,
    nll_sum: f64,
    mse_sum: f64,
}

/// Builds the loss graph for one example. The returned `loss` node already
/// carries the batch normalizers `lm_scale` and `ddpm_scale`.
fn sequence_terms<F: Real>(
    model: &TransfusionModel<F>,
    g: &mut Graph<F>,
    ex: &TrainingExample,
    causal_only: bool,
    lm_scale: f64,
    ddpm_scale: f64,
) -> Result<SequenceTerms> {
    let seq = &ex.sequence;
    let plan = LossPlan::new(seq)?;
    let input = &seq.elements[..plan.input_len];
    let mask = build_mask(input, &seq.spans, causal_only)?;
    let images: Vec<ImageInput> = ex.draws.iter().map(|d| ImageInput { x_t: &d.x_t, t: d.t }).collect();
    let pass = model.forward(g, input, &seq.spans, &images, &mask)?;

    let mut terms = Vec::new();
    let (positions, targets) = plan.lm_positions();
    let mut nll_sum = 0.0;
    if !positions.is_empty() {
        let logits = model.logits(g, &pass, &positions);
        let nll = g.cross_entropy(logits, &targets, 1.0);
        nll_sum = g.value(nll).data[0].as_f64();
        terms.push(g.scale(nll, lm_scale));
    }
    let mut mse_sum = 0.0;
    for (i, draw) in ex.draws.iter().enumerate() {
        let eps_hat = model.eps_hat(g, &pass, i)?;
        let target = model.codec.target_matrix(&draw.epsilon)?;
        let mse = g.squared_error(eps_hat, target, 1.0 / draw.epsilon.numel() as f64);
        mse_sum += g.value(mse).data[0].as_f64();
        terms.push(g.scale(mse, ddpm_scale));
    }
    let loss = terms.into_iter().reduce(|a, b| g.add(a, b));
    Ok(SequenceTerms { loss, nll_sum, mse_sum })
}

fn batch_counts(examples: &[TrainingExample]) -> Result<(usize, usize, usize)> {
    let mut tokens = 0;
    let mut images = 0;
    let mut patches = 0;
    for ex in examples {
        tokens += LossPlan::new(&ex.sequence)?.lm_count();
        images += ex.sequence.images.len();
        patches += ex.sequence.patch_count();
    }
    Ok((tokens, images, patches))
}

fn scales(tokens: usize, images: usize, lambda: f64) -> (f64, f64) {
    let lm = if tokens == 0 { 0.0 } else { 1.0 / tokens as f64 };
    let ddpm = if images == 0 { 0.0 } else { lambda / images as f64 };
    (lm, ddpm)
}

/// Loss of a batch without gradients.
pub fn batch_loss<F: Real>(
    model: &TransfusionModel<F>,
    examples: &[TrainingExample],
    causal_only: bool,
    lambda: f64,
) -> Result<LossReport> {
    let (tokens, images, patches) = batch_counts(examples)?;
    let per: Vec<Result<(f64, f64)>> = par::map_collect(examples, |ex| {
        let mut g = Graph::new(&model.params);
        let t = sequence_terms(model, &mut g, ex, causal_only, 0.0, 0.0)?;
        Ok((t.nll_sum, t.mse_sum))
    });
    let mut nll = 0.0;
    let mut mse = 0.0;
    for r in per {
        let (a, b) = r?;
        nll += a;
        mse += b;
    }
    Ok(LossReport::new(nll, tokens, mse, images, patches, lambda))
}

/// Loss of a batch and the gradient of its `total`. Sequences are
/// differentiated independently and their gradients summed in batch order,
/// so the result does not depend on the thread count.
pub fn batch_gradients<F: Real>(
    model: &TransfusionModel<F>,
    examples: &[TrainingExample],
    causal_only: bool,
    lambda: f64,
) -> Result<(LossReport, Gradients<F>)> {
    let (tokens, images, patches) = batch_counts(examples)?;
    let (lm_scale, ddpm_scale) = scales(tokens, images, lambda);
    let per: Vec<Result<(f64, f64, Option<Gradients<F>>)>> = par::map_collect(examples, |ex| {
        let mut g = Graph::new(&model.params);
        let t = sequence_terms(model, &mut g, ex, causal_only, lm_scale, ddpm_scale)?;
        let grads = t.loss.map(|l| g.backward(l));
        Ok((t.nll_sum, t.mse_sum, grads))
    });
    let mut nll = 0.0;
    let mut mse = 0.0;
    let mut total = model.params.zeros_like();
    for r in per {
        let (a, b, grads) = r?;
        nll += a;
        mse += b;
        if let Some(grads) = grads {
            total.accumulate(&grads);
        }
    }
    Ok((LossReport::new(nll, tokens, mse, images, patches, lambda), total))
}
