use serde::Serialize;

use rand::Rng;

use crate::data::vocab::{BOS, EOS, NUM_RESERVED};
use crate::data::{Image, Layout, MixedSequence};
use crate::diffusion::{DiffusionDraw, NoiseSchedule, DEFAULT_OFFSET};
use crate::error::Result;
use crate::model::{batch_gradients, batch_loss, ModelConfig, TrainingExample, TransfusionModel};
use crate::par;
use crate::rng::{normal_vec, stream, Purpose, StreamRng};

/// Denominator floor for relative errors, so entries whose true gradient
/// is zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_rel_err_two_point: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Worst error against the five-point central difference.
    pub max_rel_err: f64,
    /// Worst error against the plain two-point central difference, whose
    /// O(h^2) truncation dominates on high-curvature entries.
    pub max_rel_err_two_point: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub params: Vec<ParamCheck>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central differences of the batch total with step `h`, compared against
/// the analytic gradient. The reference derivative is the five-point
/// stencil `(8(f(x+h/2) - f(x-h/2)) - (f(x+h) - f(x-h))) / (6h)`,
/// i.e. the two-point quotients at `h` and `h/2` combined to cancel the
/// O(h^2) term. `stride` > 1 checks every `stride`-th element of
/// each parameter (always including the first).
pub fn grad_check(
    model: &TransfusionModel<f64>,
    batch: &[TrainingExample],
    causal_only: bool,
    lambda: f64,
    h: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    let (_, grads) = batch_gradients(model, batch, causal_only, lambda)?;
    let stride = stride.max(1);
    let mut params = Vec::new();
    let mut worst = (0.0f64, String::new(), 0usize);
    let mut checked = 0;
    let mut worst_two_point = 0.0f64;
    for id in model.params.ids() {
        let name = model.params.param(id).name.clone();
        let n = model.params.get(id).len();
        let indices: Vec<usize> = (0..n).step_by(stride).collect();
        let errs: Vec<Result<(f64, f64)>> = par::map_collect(&indices, |&k| {
            let mut probe = model.clone();
            let x = probe.params.get(id).data[k];
            let mut at = |dx: f64| -> Result<f64> {
                probe.params.get_mut(id).data[k] = x + dx;
                Ok(batch_loss(&probe, batch, causal_only, lambda)?.total)
            };
            let wide = at(h)? - at(-h)?;
            let narrow = at(h / 2.0)? - at(-h / 2.0)?;
            let two_point = wide / (2.0 * h);
            let five_point = (8.0 * narrow - wide) / (6.0 * h);
            let a = grads.get(id).data[k];
            Ok((rel_err(a, five_point), rel_err(a, two_point)))
        });
        let mut max = 0.0f64;
        let mut max2 = 0.0f64;
        for (&k, e) in indices.iter().zip(errs) {
            let (e, e2) = e?;
            max = max.max(e);
            max2 = max2.max(e2);
            if e > worst.0 {
                worst = (e, name.clone(), k);
            }
        }
        worst_two_point = worst_two_point.max(max2);
        checked += indices.len();
        params.push(ParamCheck { name, checked: indices.len(), max_rel_err: max, max_rel_err_two_point: max2 });
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        max_rel_err_two_point: worst_two_point, worst_param: worst.1, worst_index: worst.2, checked, params })
}

/// Two short sequences shaped like training data for `config`: a few text
/// tokens, one random image at timesteps 400 and 900, and EOS.
pub fn probe_batch(config: &ModelConfig, seed: u64) -> Result<Vec<TrainingExample>> {
    let schedule = NoiseSchedule::cosine(1000, DEFAULT_OFFSET)?;
    let c = &config.codec;
    let token = |rng: &mut StreamRng| rng.random_range(NUM_RESERVED..config.vocab_size);
    [400, 900]
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = stream(seed, Purpose::Data, i as u64);
            let pixels = normal_vec(&mut rng, c.channels * c.image_hw * c.image_hw);
            let image = Image::from_vec(c.channels, c.image_hw, c.image_hw, pixels.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())?;
            let mut seq = MixedSequence::empty(c.patch_size);
            seq.push_token(BOS);
            seq.push_token(token(&mut rng));
            seq.push_token(token(&mut rng));
            seq.push_image(image.clone(), Layout::CaptionFirst)?;
            seq.push_token(token(&mut rng));
            seq.push_token(EOS);
            let draw = DiffusionDraw::new(&image, t, &schedule, &mut rng)?;
            TrainingExample::new(seq, vec![draw])
        })
        .collect()
}
