//! Seeded RNG streams.
//!
//! Every random draw in training comes from a stream keyed by
//! `(seed, purpose, index)`, so any step can be replayed without carrying
//! generator state around.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Independent purposes for RNG streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Timestep = 3,
    Noise = 4,
    Layout = 5,
    Sampling = 6,
    Codebook = 7,
    Eval = 8,
    Batch = 9,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let key = splitmix(splitmix(splitmix(seed) ^ purpose as u64) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| normal(rng) as f32).collect()
}
