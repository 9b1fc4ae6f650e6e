//! Optimization: learning-rate schedule, AdamW, batched steps, the training
//! loop with its log and checkpoints, and the finite-difference gradient
//! check.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry};
pub use gradcheck::{grad_check, probe_batch, rel_err, GradCheckReport, ParamCheck, REL_ERR_FLOOR};

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Layout, MixedSequence};
use crate::diffusion::{sample_timestep, DiffusionDraw, NoiseSchedule, DEFAULT_OFFSET};
use crate::error::{Error, Result};
use crate::model::{batch_gradients, LossReport, ModelConfig, TrainingExample, TransfusionModel};
use crate::rng::{stream, Purpose};
use crate::tensor::{Gradients, Mat, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Sequences per step.
    pub batch_size: usize,
    pub total_steps: usize,
    pub lambda: f64,
    /// Diffusion timesteps T.
    pub diffusion_steps: usize,
    pub schedule_offset: f64,
    /// Cap t at T/2 for images that precede their caption.
    pub noise_limit: bool,
    /// Plain causal attention everywhere, including inside images.
    pub causal_only: bool,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup_steps: 4000,
            lr_final: 1.5e-5,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch_size: 8,
            total_steps: 20000,
            lambda: 5.0,
            diffusion_steps: 1000,
            schedule_offset: DEFAULT_OFFSET,
            noise_limit: true,
            causal_only: false,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be below total_steps");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return bad("lambda must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        self.model.validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.diffusion_steps, self.schedule_offset)
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_final` at
/// `total_steps`; constant afterwards.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_steps;
    if step < warmup {
        return config.lr_peak * step as f64 / warmup as f64;
    }
    let span = config.total_steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    config.lr_final + (config.lr_peak - config.lr_final) * cosine
}

/// AdamW state; weight decay is decoupled and skipped for parameters
/// flagged `decay = false` (norm gains).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: usize,
    pub m: Vec<Mat<f32>>,
    pub v: Vec<Mat<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = params.zeros_like().grads;
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64, config: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.decay { 1.0 - lr * config.weight_decay } else { 1.0 };
            let g = &grads.grads[i].data;
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            for (j, w) in p.value.data.iter_mut().enumerate() {
                let gj = g[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let step = (mj / bc1) / ((vj / bc2).sqrt() + config.adam_eps);
                *w = (*w as f64 * decay - lr * step) as f32;
            }
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub clipped_norm: f64,
}

/// Computes the batch gradient, clips it to `grad_clip` global norm and
/// applies AdamW with the scheduled learning rate for `step` (1-based).
pub fn train_step(
    model: &mut TransfusionModel<f32>,
    batch: &[TrainingExample],
    optimizer: &mut AdamW,
    config: &TrainConfig,
    step: usize,
) -> Result<StepOutcome> {
    let (report, mut grads) = batch_gradients(model, batch, config.causal_only, config.lambda)?;
    let grad_norm = grads.global_norm();
    if !report.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { step, lm: report.lm_loss, ddpm: report.ddpm_loss });
    }
    if grad_norm > config.grad_clip {
        grads.scale((config.grad_clip / grad_norm) as f32);
    }
    let clipped_norm = grads.global_norm();
    let lr = lr_at(step, config);
    optimizer.update(&mut model.params, &grads, lr, config);
    Ok(StepOutcome { report, lr, grad_norm, clipped_norm })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub lm_loss: f64,
    pub ddpm_loss: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,lr,lm_loss,ddpm_loss,total,grad_norm";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.lr, self.lm_loss, self.ddpm_loss, self.total, self.grad_norm)
    }
}

/// Counts of sampled training timesteps, split by image layout; index `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepHistogram {
    pub caption_first: Vec<u64>,
    pub image_first: Vec<u64>,
}

impl TimestepHistogram {
    pub fn new(steps: usize) -> Self {
        Self { caption_first: vec![0; steps + 1], image_first: vec![0; steps + 1] }
    }

    pub fn record(&mut self, layout: Layout, t: usize) {
        match layout {
            Layout::CaptionFirst => self.caption_first[t] += 1,
            Layout::ImageFirst => self.image_first[t] += 1,
        }
    }

    /// Largest `t` recorded for `layout`, if any.
    pub fn max_t(&self, layout: Layout) -> Option<usize> {
        let counts = match layout {
            Layout::CaptionFirst => &self.caption_first,
            Layout::ImageFirst => &self.image_first,
        };
        counts.iter().rposition(|&c| c > 0)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,caption_first,image_first")?;
        for t in 1..self.caption_first.len() {
            writeln!(w, "{t},{},{}", self.caption_first[t], self.image_first[t])?;
        }
        Ok(())
    }
}

/// Picks the batch for `step` and draws a timestep and noise per image.
/// Everything is a pure function of `(config.seed, step)`.
pub fn make_batch(
    data: &[MixedSequence],
    step: usize,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<TrainingExample>> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut pick = stream(config.seed, Purpose::Batch, step as u64);
    let indices: Vec<usize> = if config.batch_size >= data.len() {
        (0..data.len()).collect()
    } else {
        index::sample(&mut pick, data.len(), config.batch_size).into_vec()
    };
    let mut t_rng = stream(config.seed, Purpose::Timestep, step as u64);
    let mut noise_rng = stream(config.seed, Purpose::Noise, step as u64);
    indices
        .into_iter()
        .map(|i| {
            let seq = &data[i];
            let draws = seq
                .images
                .iter()
                .zip(&seq.layouts)
                .map(|(img, &layout)| {
                    let t = sample_timestep(&mut t_rng, layout, schedule, config.noise_limit);
                    DiffusionDraw::new(img, t, schedule, &mut noise_rng)
                })
                .collect::<Result<Vec<_>>>()?;
            TrainingExample::new(seq.clone(), draws)
        })
        .collect()
}

/// Model, optimizer and bookkeeping for a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: TransfusionModel<f32>,
    pub optimizer: AdamW,
    pub schedule: NoiseSchedule,
    /// Completed steps.
    pub step: usize,
    pub history: Vec<LogRow>,
    pub histogram: TimestepHistogram,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Purpose::Init, 0);
        let model = TransfusionModel::new(&config.model, &mut rng)?;
        Self::with_model(config, model)
    }

    /// Starts from an existing model (fresh optimizer state).
    pub fn with_model(config: TrainConfig, model: TransfusionModel<f32>) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let optimizer = AdamW::new(&model.params);
        let histogram = TimestepHistogram::new(config.diffusion_steps);
        Ok(Self { config, model, optimizer, schedule, step: 0, history: Vec::new(), histogram })
    }

    /// Runs one step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[MixedSequence]) -> Result<LogRow> {
        let step = self.step + 1;
        let batch = make_batch(data, step, &self.config, &self.schedule)?;
        let outcome = match train_step(&mut self.model, &batch, &mut self.optimizer, &self.config, step) {
            Ok(o) => o,
            Err(e) => {
                if let Error::NonFiniteLoss { .. } = e {
                    log::error!("non-finite loss at step {step}");
                    for (i, ex) in batch.iter().enumerate() {
                        let ts: Vec<usize> = ex.draws.iter().map(|d| d.t).collect();
                        log::error!("  sequence {i}: {} elements, timesteps {ts:?}", ex.sequence.len());
                    }
                }
                return Err(e);
            }
        };
        for ex in &batch {
            for (d, &layout) in ex.draws.iter().zip(&ex.sequence.layouts) {
                self.histogram.record(layout, d.t);
            }
        }
        self.step = step;
        let row = LogRow {
            step,
            lr: outcome.lr,
            lm_loss: outcome.report.lm_loss,
            ddpm_loss: outcome.report.ddpm_loss,
            total: outcome.report.total,
            grad_norm: outcome.grad_norm,
        };
        log::debug!("{}", row.csv_line());
        self.history.push(row.clone());
        Ok(row)
    }

    /// Runs `steps` more steps, or stops early once `stop` returns true for
    /// a log row. Each row is written to `log` as it is produced.
    pub fn run<W: Write>(
        &mut self,
        data: &[MixedSequence],
        steps: usize,
        mut log: Option<&mut W>,
        mut stop: impl FnMut(&LogRow) -> bool,
    ) -> Result<()> {
        for _ in 0..steps {
            let row = self.train_step(data)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", row.csv_line())?;
            }
            if row.step % 50 == 0 {
                log::info!("step {} lm {:.4} ddpm {:.4}", row.step, row.lm_loss, row.ddpm_loss);
            }
            if stop(&row) {
                break;
            }
        }
        Ok(())
    }

    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", LogRow::HEADER)?;
        for row in &self.history {
            writeln!(w, "{}", row.csv_line())?;
        }
        Ok(())
    }
}
