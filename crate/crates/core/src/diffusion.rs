//! Cosine noise schedule, forward noising, the ancestral sampling update and
//! classifier-free guidance.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Layout};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// Precomputed `beta`, `alpha_bar` and `sigma` tables. Index `t` of each
/// table refers to timestep `t`; `alpha_bar[0] = 1` and `beta[0] = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_bar(t) = f(t)/f(0)` with `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`;
    /// per-step betas are capped at [`MAX_BETA`] and `alpha_bar` is carried
    /// forward through the cap so `beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}`
    /// holds everywhere.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidT(steps));
        }
        if !(offset >= 0.0 && offset.is_finite()) {
            return Err(Error::InvalidOffset(offset));
        }
        let f = |t: usize| {
            let x = ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = vec![1.0; steps + 1];
        let mut beta = vec![0.0; steps + 1];
        for t in 1..=steps {
            let mut ab = f(t) / f0;
            if 1.0 - ab / alpha_bar[t - 1] > MAX_BETA {
                ab = alpha_bar[t - 1] * (1.0 - MAX_BETA);
            }
            alpha_bar[t] = ab;
            beta[t] = 1.0 - ab / alpha_bar[t - 1];
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self { steps, offset, beta, alpha_bar, sigma })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    /// CSV with columns `t,beta,alpha_bar,sigma`, one row per `t` in `0..=T`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,beta,alpha_bar,sigma")?;
        for t in 0..=self.steps {
            writeln!(w, "{t},{:e},{:e},{:e}", self.beta[t], self.alpha_bar[t], self.sigma[t])?;
        }
        Ok(())
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise(x0: &Image, t: usize, eps: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    x0.check_same_shape(eps)?;
    schedule.check_t(t)?;
    Ok(noise_with_alpha_bar(x0, eps, schedule.alpha_bar(t)))
}

pub fn noise_with_alpha_bar(x0: &Image, eps: &Image, alpha_bar: f64) -> Image {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut out = x0.clone();
    for (o, &e) in out.data.iter_mut().zip(&eps.data) {
        *o = (a * *o as f64 + b * e as f64) as f32;
    }
    out
}

/// A timestep and noise drawn for one training image.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionDraw {
    pub t: usize,
    pub epsilon: Image,
    pub x_t: Image,
}

impl DiffusionDraw {
    pub fn new<R: Rng + ?Sized>(x0: &Image, t: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let epsilon = Image::from_vec(x0.channels, x0.height, x0.width, rng::normal_vec(rng, x0.numel()))?;
        let x_t = add_noise(x0, t, &epsilon, schedule)?;
        Ok(Self { t, epsilon, x_t })
    }

    /// Clean context image: `t = 0`, zero noise.
    pub fn clean(x0: &Image) -> Self {
        Self { t: 0, epsilon: Image::zeros(x0.channels, x0.height, x0.width), x_t: x0.clone() }
    }
}

/// Posterior variance for the (possibly strided) pair `t_prev < t`.
pub fn posterior_variance(alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)) * (1.0 - alpha_bar_t / alpha_bar_prev)
}

/// Predicted clean image `(x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`,
/// clipped to `[-1, 1]`.
pub fn predict_x0(x_t: &Image, eps_hat: &Image, alpha_bar_t: f64) -> Image {
    let (a, b) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let mut out = x_t.clone();
    for (o, &e) in out.data.iter_mut().zip(&eps_hat.data) {
        *o = ((*o as f64 - b * e as f64) / a).clamp(-1.0, 1.0) as f32;
    }
    out
}

/// One reverse update given explicit `alpha_bar` values and noise scale.
/// `z` must be present when `sigma > 0`.
pub fn posterior_step(x_t: &Image, eps_hat: &Image, alpha_bar_t: f64, alpha_bar_prev: f64, sigma: f64, z: Option<&[f32]>) -> Image {
    let x0 = predict_x0(x_t, eps_hat, alpha_bar_t);
    let a = alpha_bar_prev.sqrt();
    let dir = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt();
    // noise direction consistent with the clipped x0
    let (a_t, b_t) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let mut out = x0;
    for (i, o) in out.data.iter_mut().enumerate() {
        let x0_i = *o as f64;
        let eps = if b_t > 0.0 { (x_t.data[i] as f64 - a_t * x0_i) / b_t } else { eps_hat.data[i] as f64 };
        let mut v = a * x0_i + dir * eps;
        if sigma > 0.0 {
            v += sigma * z.expect("noise required when sigma > 0")[i] as f64;
        }
        *o = v as f32;
    }
    out
}

/// Ancestral step `x_t -> x_{t_prev}`; `last_step` forces `sigma = 0`.
pub fn ddpm_step<R: Rng + ?Sized>(
    x_t: &Image,
    eps_hat: &Image,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
    last_step: bool,
) -> Result<Image> {
    if t_prev >= t {
        return Err(Error::TimestepOrder { t, t_prev });
    }
    schedule.check_t(t)?;
    x_t.check_same_shape(eps_hat)?;
    let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    if last_step {
        return Ok(posterior_step(x_t, eps_hat, ab_t, ab_prev, 0.0, None));
    }
    let sigma = posterior_variance(ab_t, ab_prev).max(0.0).sqrt();
    let z = rng::normal_vec(rng, x_t.numel());
    Ok(posterior_step(x_t, eps_hat, ab_t, ab_prev, sigma, Some(&z)))
}

/// Evenly spaced descending subset of `1..=T` that includes `T`.
pub fn inference_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    let mut out: Vec<usize> = (1..=steps)
        .rev()
        .map(|i| ((i as f64 * total as f64 / steps as f64).round() as usize).max(1))
        .collect();
    out.dedup();
    out
}

/// `eps_uncond + w (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_cond: &Image, eps_uncond: &Image, w: f64) -> Result<Image> {
    eps_cond.check_same_shape(eps_uncond)?;
    let mut out = eps_uncond.clone();
    for (o, &c) in out.data.iter_mut().zip(&eps_cond.data) {
        let u = *o as f64;
        *o = (u + w * (c as f64 - u)) as f32;
    }
    Ok(out)
}

/// Uniform on `1..=T`, or `1..=T/2` for image-first layouts when noise
/// limiting is on.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, layout: Layout, schedule: &NoiseSchedule, noise_limit: bool) -> usize {
    let max = if noise_limit && layout == Layout::ImageFirst { (schedule.steps() / 2).max(1) } else { schedule.steps() };
    rng.random_range(1..=max)
}
