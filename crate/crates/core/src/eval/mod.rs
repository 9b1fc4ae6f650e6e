//! Evaluation: perplexity, held-out diffusion loss, generation and edit
//! accuracy via the scene checker, and 6ND FLOP accounting.

mod scene_check;

pub use scene_check::{chance_bound, estimate_scene, scene_check, SceneEstimate, MIN_COLOR_SHARE, MIN_IOU};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOI, BOS};
use crate::data::{Image, Layout, MixedSequence, SceneSpec, Vocab};
use crate::diffusion::{sample_timestep, DiffusionDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::infer::{diffuse_image, GenerationParams};
use crate::model::{batch_loss, TrainingExample, TransfusionModel};
use crate::par;
use crate::rng::{stream, Purpose};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Seed of the held-out corpus and its diffusion draws.
    pub heldout_seed: u64,
    pub heldout_count: usize,
    /// Captions for generation accuracy; 0 means every grammar scene.
    pub prompt_count: usize,
    pub edit_count: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { heldout_seed: 1_000_003, heldout_count: 128, prompt_count: 0, edit_count: 0 }
    }
}

/// `exp` of the mean NLL over the LM targets of `sequences`. Images, if any,
/// are clean context.
pub fn perplexity<F: Real>(model: &TransfusionModel<F>, sequences: &[MixedSequence], causal_only: bool) -> Result<f64> {
    let examples: Vec<TrainingExample> = sequences.iter().cloned().map(TrainingExample::clean).collect();
    let report = batch_loss(model, &examples, causal_only, 0.0)?;
    if report.empty_lm {
        return Err(Error::EmptyEvalSet);
    }
    Ok(report.lm_loss.exp())
}

/// Mean per-image diffusion loss with timesteps and noise drawn from
/// `seed`, one stream per sequence.
pub fn heldout_ddpm_loss<F: Real>(
    model: &TransfusionModel<F>,
    sequences: &[MixedSequence],
    schedule: &NoiseSchedule,
    seed: u64,
    causal_only: bool,
    noise_limit: bool,
) -> Result<f64> {
    let examples = sequences
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = stream(seed, Purpose::Eval, i as u64);
            let draws = seq
                .images
                .iter()
                .zip(&seq.layouts)
                .map(|(img, &layout)| {
                    let t = sample_timestep(&mut rng, layout, schedule, noise_limit);
                    DiffusionDraw::new(img, t, schedule, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            TrainingExample::new(seq.clone(), draws)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = batch_loss(model, &examples, causal_only, 1.0)?;
    if report.images == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok(report.ddpm_loss)
}

/// Outcome for one prompt.
#[derive(Clone, Debug)]
pub struct PromptOutcome {
    pub prompt: String,
    pub target: String,
    pub pass: bool,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub outcomes: Vec<PromptOutcome>,
}

impl AccuracyReport {
    fn new(outcomes: Vec<PromptOutcome>) -> Self {
        let passed = outcomes.iter().filter(|o| o.pass).count();
        Self { accuracy: passed as f64 / outcomes.len() as f64, outcomes }
    }

    /// CSV of `prompt,pass,image`, naming images `{prefix}{index:03}.ppm`.
    pub fn write_csv<W: Write>(&self, mut w: W, image_prefix: &str) -> Result<()> {
        writeln!(w, "prompt,pass,image")?;
        for (i, o) in self.outcomes.iter().enumerate() {
            writeln!(w, "\"{}\",{},{image_prefix}{i:03}.ppm", o.prompt.replace('"', "\"\""), o.pass)?;
        }
        Ok(())
    }
}

fn caption_prefix(caption: &str, patch_size: usize) -> Result<MixedSequence> {
    let mut seq = MixedSequence::empty(patch_size);
    seq.push_token(BOS);
    for id in Vocab::text().tokenize(caption)? {
        seq.push_token(id);
    }
    seq.push_token(BOI);
    Ok(seq)
}

/// Fraction of `captions` whose image, generated from `[BOS, caption, BOI]`,
/// passes [`scene_check`]. Prompt `i` samples from its own stream.
pub fn generation_accuracy<F: Real>(
    model: &TransfusionModel<F>,
    captions: &[String],
    params: &GenerationParams,
    schedule: &NoiseSchedule,
) -> Result<AccuracyReport> {
    if captions.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let k = model.config.codec.patch_size;
    let indexed: Vec<(usize, &String)> = captions.iter().enumerate().collect();
    let outcomes = par::map_collect(&indexed, |&(i, caption)| {
        let prefix = caption_prefix(caption, k)?;
        let mut rng = stream(params.seed, Purpose::Sampling, i as u64);
        let image = diffuse_image(model, &prefix, params, schedule, &mut rng)?.image;
        let pass = scene_check(caption, &image)?;
        Ok(PromptOutcome { prompt: caption.clone(), target: caption.clone(), pass, image })
    });
    Ok(AccuracyReport::new(outcomes.into_iter().collect::<Result<Vec<_>>>()?))
}

/// An editing test case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub input: SceneSpec,
    pub instruction: String,
    pub target: SceneSpec,
}

/// Fraction of cases whose second image, generated after
/// `[BOS, BOI, input, EOI, instruction, BOI]`, passes the checker against
/// the target scene's caption.
pub fn edit_accuracy<F: Real>(
    model: &TransfusionModel<F>,
    cases: &[EditCase],
    params: &GenerationParams,
    schedule: &NoiseSchedule,
) -> Result<AccuracyReport> {
    if cases.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let cfg = &model.config.codec;
    let indexed: Vec<(usize, &EditCase)> = cases.iter().enumerate().collect();
    let outcomes = par::map_collect(&indexed, |&(i, case)| {
        let mut prefix = MixedSequence::empty(cfg.patch_size);
        prefix.push_token(BOS);
        prefix.push_image(case.input.render(cfg.image_hw, cfg.image_hw), Layout::ImageFirst)?;
        for id in Vocab::text().tokenize(&case.instruction)? {
            prefix.push_token(id);
        }
        prefix.push_token(BOI);
        let mut rng = stream(params.seed, Purpose::Sampling, i as u64);
        let image = diffuse_image(model, &prefix, params, schedule, &mut rng)?.image;
        let target = case.target.caption();
        let pass = scene_check(&target, &image)?;
        Ok(PromptOutcome { prompt: case.instruction.clone(), target, pass, image })
    });
    Ok(AccuracyReport::new(outcomes.into_iter().collect::<Result<Vec<_>>>()?))
}

/// `6 N D`.
pub fn estimate_flops(params: usize, tokens: usize) -> f64 {
    6.0 * params as f64 * tokens as f64
}

/// FLOPs at which a `(flops, metric)` curve (lower metric is better) first
/// reaches `target`, interpolating linearly between logged points.
pub fn flops_to_reach(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    let first = curve.first()?;
    if first.1 <= target {
        return Some(first.0);
    }
    curve.windows(2).find_map(|w| {
        let ((f0, m0), (f1, m1)) = (w[0], w[1]);
        (m1 <= target).then(|| if m0 == m1 { f1 } else { f0 + (f1 - f0) * (m0 - target) / (m0 - m1) })
    })
}

/// FLOPs `a` needs to match `b`'s final metric, divided by the FLOPs `b`
/// needed. Values below 1 mean `a` is more compute-efficient.
pub fn parity_flop_ratio(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<f64> {
    let target = b.last()?.1;
    Some(flops_to_reach(a, target)? / flops_to_reach(b, target)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub step: usize,
    pub text_ppl: f64,
    pub heldout_ddpm_loss: f64,
    pub generation_accuracy: f64,
    pub generation_prompts: usize,
    pub edit_accuracy: Option<f64>,
    /// Edit test scenes never appear as edit inputs in training.
    pub edit_split_disjoint: Option<bool>,
    pub chance_bound: f64,
    pub flops: f64,
    pub cfg_weight: f64,
    pub diffusion_steps: usize,
}
