//! Mixed-mode decoding: token sampling until `BOI`, then a reverse
//! diffusion loop over a full image span, then `EOI` and back to tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOI, BOS, EOI, EOS, PAD};
use crate::data::{Element, Image, Layout, MixedSequence};
use crate::diffusion::{cfg_combine, ddpm_step, inference_timesteps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mask::build_mask;
use crate::model::{ImageInput, TransfusionModel};
use crate::rng::{self, stream, Purpose};
use crate::tensor::{Graph, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    /// Elements appended after the prompt before giving up; an image counts
    /// as its `n + 2` elements.
    pub max_new_elements: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub diffusion_steps: usize,
    pub cfg_weight: f64,
    /// Sample ancestral noise at intermediate steps; when false every step
    /// uses sigma = 0.
    pub stochastic: bool,
    /// Must match the attention used in training.
    pub causal_only: bool,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_new_elements: 256,
            temperature: 0.0,
            top_p: 1.0,
            diffusion_steps: 250,
            cfg_weight: 3.0,
            stochastic: true,
            causal_only: false,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.diffusion_steps == 0 || self.diffusion_steps > schedule.steps() {
            return Err(Error::Config(format!(
                "diffusion_steps {} outside 1..={}",
                self.diffusion_steps,
                schedule.steps()
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.temperature < 0.0 {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// Result of [`generate`].
#[derive(Clone, Debug)]
pub struct Generation {
    pub sequence: MixedSequence,
    /// The element budget ran out before `EOS`; `sequence` is partial.
    pub budget_exceeded: bool,
    pub forward_passes: usize,
}

/// Result of [`diffuse_image`].
#[derive(Clone, Debug)]
pub struct DiffusedImage {
    pub image: Image,
    pub forward_passes: usize,
}

/// Picks an index from `logits`: argmax (lowest index on ties) at
/// temperature 0, otherwise nucleus sampling. Entries at negative infinity
/// are never chosen.
pub fn sample_index<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> =
        logits.iter().enumerate().map(|(i, &v)| (i, ((v - max) / temperature).exp())).collect();
    let sum: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= sum);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut mass = 0.0;
    for p in &probs {
        kept += 1;
        mass += p.1;
        if mass >= top_p {
            break;
        }
    }
    probs.truncate(kept);
    let r = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &(i, p) in &probs {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs[0].0
}

/// Next token from `logits`. `PAD` and `EOI` are never produced; `EOI` is
/// only ever appended after an image.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> u32 {
    let mut masked = logits.to_vec();
    masked[PAD as usize] = f64::NEG_INFINITY;
    masked[EOI as usize] = f64::NEG_INFINITY;
    sample_index(&masked, temperature, top_p, rng) as u32
}

/// Images in `seq` as clean context inputs.
fn clean_inputs(seq: &MixedSequence) -> Vec<ImageInput<'_>> {
    seq.images.iter().map(|x_t| ImageInput { x_t, t: 0 }).collect()
}

/// Next-token logits after the last element of `seq`.
pub fn next_token_logits<F: Real>(model: &TransfusionModel<F>, seq: &MixedSequence, causal_only: bool) -> Result<Vec<f64>> {
    let mask = build_mask(&seq.elements, &seq.spans, causal_only)?;
    let mut g = Graph::new(&model.params);
    let pass = model.forward(&mut g, &seq.elements, &seq.spans, &clean_inputs(seq), &mask)?;
    let logits = model.logits(&mut g, &pass, &[seq.len() - 1]);
    Ok(g.value(logits).data.iter().map(|v| v.as_f64()).collect())
}

/// Noise prediction for the last image of `seq`, which sits at timestep
/// `t`; earlier images are clean context.
pub fn predict_noise<F: Real>(model: &TransfusionModel<F>, seq: &MixedSequence, t: usize, causal_only: bool) -> Result<Image> {
    let last = seq.images.len().checked_sub(1).ok_or_else(|| Error::MalformedSequence("no image to denoise".into()))?;
    let mask = build_mask(&seq.elements, &seq.spans, causal_only)?;
    let mut inputs = clean_inputs(seq);
    inputs[last].t = t;
    let mut g = Graph::new(&model.params);
    let pass = model.forward(&mut g, &seq.elements, &seq.spans, &inputs, &mask)?;
    let eps = model.eps_hat(&mut g, &pass, last)?;
    model.codec.output_image(g.value(eps))
}

fn layout_for(prefix: &MixedSequence) -> Layout {
    let has_text = prefix.elements.iter().any(|e| match e {
        Element::Token(id) => ![PAD, BOS, EOS, BOI, EOI].contains(id),
        Element::ImageRef { .. } => false,
    });
    if has_text {
        Layout::CaptionFirst
    } else {
        Layout::ImageFirst
    }
}

/// Generates one image after `prefix`, which must end with `BOI`.
///
/// The image starts as pure noise at `t = T` and is overwritten in place at
/// each strided step. With `cfg_weight != 1` a second pass over
/// `[BOS, BOI, image]` supplies the unconditional prediction.
pub fn diffuse_image<F: Real>(
    model: &TransfusionModel<F>,
    prefix: &MixedSequence,
    params: &GenerationParams,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<DiffusedImage> {
    if prefix.elements.last() != Some(&Element::Token(BOI)) {
        return Err(Error::PrefixNotAtBoi);
    }
    params.validate(schedule)?;
    let cfg = &model.config.codec;
    let noise = rng::normal_vec(rng, cfg.channels * cfg.image_hw * cfg.image_hw);
    let x = Image::from_vec(cfg.channels, cfg.image_hw, cfg.image_hw, noise)?;
    let layout = layout_for(prefix);

    let mut cond = prefix.clone();
    cond.open_image_after_boi(x.clone(), layout)?;
    let use_cfg = params.cfg_weight != 1.0;
    let mut uncond = MixedSequence::empty(prefix.patch_size);
    uncond.push_token(BOS);
    uncond.push_token(BOI);
    uncond.open_image_after_boi(x, Layout::ImageFirst)?;
    let ci = cond.images.len() - 1;

    let steps = inference_timesteps(schedule.steps(), params.diffusion_steps);
    let mut passes = 0;
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps_c = predict_noise(model, &cond, t, params.causal_only)?;
        passes += 1;
        let eps = if use_cfg {
            uncond.images[0] = cond.images[ci].clone();
            let eps_u = predict_noise(model, &uncond, t, params.causal_only)?;
            passes += 1;
            cfg_combine(&eps_c, &eps_u, params.cfg_weight)?
        } else {
            eps_c
        };
        let deterministic = !params.stochastic || t_prev == 0;
        cond.images[ci] = ddpm_step(&cond.images[ci], &eps, t, t_prev, schedule, rng, deterministic)?;
    }
    Ok(DiffusedImage { image: cond.images.swap_remove(ci), forward_passes: passes })
}

/// Continues `prompt` until `EOS` or the element budget runs out. An image
/// opened by the prompt itself is always completed.
pub fn generate<F: Real>(
    model: &TransfusionModel<F>,
    prompt: &MixedSequence,
    params: &GenerationParams,
    schedule: &NoiseSchedule,
) -> Result<Generation> {
    params.validate(schedule)?;
    if prompt.elements.first() != Some(&Element::Token(BOS)) {
        return Err(Error::MalformedSequence("prompt must start with BOS".into()));
    }
    if prompt.elements.contains(&Element::Token(EOS)) {
        return Err(Error::MalformedSequence("prompt already contains EOS".into()));
    }
    let mut rng = stream(params.seed, Purpose::Sampling, 0);
    let mut seq = prompt.clone();
    let n = model.patches_per_image();
    let budget = prompt.len() + params.max_new_elements;
    let mut passes = 0;
    loop {
        if seq.elements.last() == Some(&Element::Token(BOI)) {
            let out = diffuse_image(model, &seq, params, schedule, &mut rng)?;
            passes += out.forward_passes;
            let layout = layout_for(&seq);
            seq.open_image_after_boi(out.image, layout)?;
            seq.push_token(EOI);
            continue;
        }
        if seq.len() >= budget {
            return Ok(Generation { sequence: seq, budget_exceeded: true, forward_passes: passes });
        }
        let logits = next_token_logits(model, &seq, params.causal_only)?;
        passes += 1;
        let tok = sample_token(&logits, params.temperature, params.top_p, &mut rng);
        // an image that cannot close within the budget is never opened
        if tok == BOI && seq.len() + n + 2 > budget {
            return Ok(Generation { sequence: seq, budget_exceeded: true, forward_passes: passes });
        }
        seq.push_token(tok);
        if tok == EOS {
            return Ok(Generation { sequence: seq, budget_exceeded: false, forward_passes: passes });
        }
    }
}

/// Placeholder in prompt text that requests an image.
pub const IMAGE_PLACEHOLDER: &str = "<image>";

/// Runs a text prompt in which each [`IMAGE_PLACEHOLDER`] requests a
/// generated image at that point. Literal text is appended verbatim; after
/// the prompt is consumed, decoding continues until `EOS` or the budget.
pub fn generate_from_text<F: Real>(
    model: &TransfusionModel<F>,
    prompt: &str,
    params: &GenerationParams,
    schedule: &NoiseSchedule,
) -> Result<Generation> {
    let vocab = crate::data::Vocab::text();
    let mut seq = MixedSequence::empty(model.config.codec.patch_size);
    seq.push_token(BOS);
    let mut rng = stream(params.seed, Purpose::Sampling, u64::MAX);
    let mut passes = 0;
    let parts: Vec<&str> = prompt.split(IMAGE_PLACEHOLDER).collect();
    for (i, text) in parts.iter().enumerate() {
        for id in vocab.tokenize(text)? {
            seq.push_token(id);
        }
        if i + 1 < parts.len() {
            seq.push_token(BOI);
            let out = diffuse_image(model, &seq, params, schedule, &mut rng)?;
            passes += out.forward_passes;
            let layout = layout_for(&seq);
            seq.open_image_after_boi(out.image, layout)?;
            seq.push_token(EOI);
        }
    }
    let mut rest = params.clone();
    rest.max_new_elements = params.max_new_elements.saturating_sub(seq.len() - 1);
    let mut out = generate(model, &seq, &rest, schedule)?;
    out.forward_passes += passes;
    Ok(out)
}

/// Text of `seq` with each image shown as `<image:NNN>` and markers other
/// than `BOI`/`EOI` dropped.
pub fn render_text(seq: &MixedSequence) -> String {
    let mut out = String::new();
    let mut image = 0;
    for e in &seq.elements {
        match *e {
            Element::Token(BOI) => {
                out.push_str(&format!("<image:{image:03}>"));
                image += 1;
            }
            Element::Token(id) => {
                if let Some(c) = crate::data::Vocab::id_char(id) {
                    out.push(c);
                }
            }
            Element::ImageRef { .. } => {}
        }
    }
    out
}
