//! Patchification and the modality-specific encoders/decoders that map
//! images to transformer vectors and back.

mod codec;
mod unet;

pub use codec::{Codec, CodecConfig, CodecKind, EncodedImage, OutputLayout};

use crate::data::{patches_per_image, Image};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

/// Geometry of the patch encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub model_dim: usize,
}

impl PatchConfig {
    pub fn new(patch_size: usize, channels: usize, height: usize, width: usize, model_dim: usize) -> Result<Self> {
        patches_per_image(height, width, patch_size)?;
        Ok(Self { patch_size, channels, height, width, model_dim })
    }

    /// Patches per image, `(H/k)(W/k)`.
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// Length of one flattened patch, `k*k*C`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }
}

/// Splits an image into `k x k` patches ordered left-to-right,
/// top-to-bottom. Within a patch, values are ordered `(dy, dx, channel)`.
pub fn patchify(image: &Image, k: usize) -> Result<Vec<Vec<f32>>> {
    patches_per_image(image.height, image.width, k)?;
    let (gh, gw) = (image.height / k, image.width / k);
    let mut out = Vec::with_capacity(gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let mut patch = Vec::with_capacity(k * k * image.channels);
            for dy in 0..k {
                for dx in 0..k {
                    for c in 0..image.channels {
                        patch.push(image.get(c, py * k + dy, px * k + dx));
                    }
                }
            }
            out.push(patch);
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Vec<f32>], k: usize, channels: usize, height: usize, width: usize) -> Result<Image> {
    let n = patches_per_image(height, width, k)?;
    if patches.len() != n {
        return Err(Error::CountMismatch { expected: n, actual: patches.len() });
    }
    let gw = width / k;
    let mut img = Image::zeros(channels, height, width);
    for (i, patch) in patches.iter().enumerate() {
        if patch.len() != k * k * channels {
            return Err(Error::ShapeMismatch { expected: vec![k * k * channels], actual: vec![patch.len()] });
        }
        let (py, px) = (i / gw, i % gw);
        let mut it = patch.iter();
        for dy in 0..k {
            for dx in 0..k {
                for c in 0..channels {
                    img.set(c, py * k + dy, px * k + dx, *it.next().unwrap());
                }
            }
        }
    }
    Ok(img)
}

/// Patches as rows of a `[n, k*k*C]` matrix.
pub fn patch_matrix<F: Real>(image: &Image, k: usize) -> Result<Mat<F>> {
    let patches = patchify(image, k)?;
    let cols = k * k * image.channels;
    let data = patches.iter().flatten().map(|&v| F::of(v as f64)).collect();
    Ok(Mat::from_vec(patches.len(), cols, data))
}

/// Pixels as rows of a `[H*W, C]` matrix.
pub fn pixel_matrix<F: Real>(image: &Image) -> Mat<F> {
    let mut m = Mat::zeros(image.height * image.width, image.channels);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..image.channels {
                m.data[(y * image.width + x) * image.channels + c] = F::of(image.get(c, y, x) as f64);
            }
        }
    }
    m
}

pub fn image_from_pixel_matrix<F: Real>(m: &Mat<F>, channels: usize, height: usize, width: usize) -> Image {
    let mut img = Image::zeros(channels, height, width);
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                img.set(c, y, x, m.data[(y * width + x) * channels + c].as_f64() as f32);
            }
        }
    }
    img
}

/// Sinusoidal embedding of timestep `t`: `dim/2` sine components followed by
/// `dim/2` cosine components, frequencies geometric from 1 down to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::OddDim(dim));
    }
    let half = dim / 2;
    let freq = |i: usize| {
        if half == 1 {
            1.0
        } else {
            10000f64.powf(-(i as f64) / (half - 1) as f64)
        }
    };
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let a = t as f64 * freq(i);
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_one_is_top_right_block() {
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let img = Image::from_vec(1, 4, 4, data).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.len(), 4);
        // rows 0..2, cols 2..4 of a row-major 4x4 grid
        assert_eq!(p[1], vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p[2], vec![8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn whole_image_patch() {
        let img = Image::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p, vec![vec![1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn counts_for_sweep() {
        for (k, n) in [(1, 256), (2, 64), (4, 16), (8, 4)] {
            assert_eq!(PatchConfig::new(k, 3, 16, 16, 8).unwrap().num_patches(), n);
        }
        // full-size geometry: 32x32 latents
        for (k, n) in [(1, 1024), (2, 256), (4, 64), (8, 16)] {
            assert_eq!(PatchConfig::new(k, 8, 32, 32, 8).unwrap().num_patches(), n);
        }
        assert!(PatchConfig::new(3, 3, 16, 16, 8).is_err());
    }

    #[test]
    fn timestep_embedding_properties() {
        let e0 = timestep_embedding(0, 16).unwrap();
        assert!(e0[..8].iter().all(|&v| v == 0.0));
        assert!(e0[8..].iter().all(|&v| v == 1.0));
        assert!(matches!(timestep_embedding(1, 7), Err(Error::OddDim(7))));
        assert_eq!(timestep_embedding(17, 32).unwrap(), timestep_embedding(17, 32).unwrap());
        let all: Vec<Vec<f64>> = (1..=1000).map(|t| timestep_embedding(t, 32).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let dist: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(dist > 1e-12, "t={} and t={} collide", i + 1, j + 1);
            }
        }
    }

    proptest! {
        #[test]
        fn patchify_round_trip(kexp in 0u32..4, c in 1usize..4, seed in any::<u64>()) {
            let k = 1usize << kexp;
            let (h, w) = (8usize, 16usize);
            let mut x = seed;
            let data: Vec<f32> = (0..c * h * w).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
                (x >> 40) as f32 / (1u64 << 24) as f32
            }).collect();
            let img = Image::from_vec(c, h, w, data).unwrap();
            let back = unpatchify(&patchify(&img, k).unwrap(), k, c, h, w).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
