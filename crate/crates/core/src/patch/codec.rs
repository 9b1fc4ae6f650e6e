use rand::Rng;
use serde::{Deserialize, Serialize};

use super::unet::UNetCodec;
use super::{image_from_pixel_matrix, patch_matrix, pixel_matrix, timestep_embedding, unpatchify, PatchConfig};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::{randn, Graph, Mat, ParamId, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Linear,
    Unet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub patch_size: usize,
    pub channels: usize,
    pub image_hw: usize,
    /// Width of the sinusoidal timestep features.
    pub t_dim: usize,
    /// Channel width per U-Net resolution stage; the last entry repeats for
    /// deeper stages.
    pub unet_widths: Vec<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { kind: CodecKind::Linear, patch_size: 4, channels: 3, image_hw: 16, t_dim: 32, unet_widths: vec![32, 64] }
    }
}

impl CodecConfig {
    pub fn patch_config(&self, model_dim: usize) -> Result<PatchConfig> {
        PatchConfig::new(self.patch_size, self.channels, self.image_hw, self.image_hw, model_dim)
    }
}

/// How decoder output rows are arranged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputLayout {
    /// `[n, k*k*C]`, one flattened patch per row.
    Patches,
    /// `[H*W, C]`, one pixel per row.
    Pixels,
}

/// Encoder output for one image, plus what its decode needs.
#[derive(Clone, Debug)]
pub struct EncodedImage {
    /// `[n, d]` transformer inputs.
    pub vectors: Var,
    /// U-Net activations, shallowest first; empty for the linear codec.
    pub skips: Vec<Var>,
    pub temb: Option<Var>,
}

#[derive(Clone, Debug)]
pub(crate) struct TimeMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    t_dim: usize,
}

impl TimeMlp {
    pub(crate) fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R, prefix: &str, t_dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), randn(rng, t_dim, hidden, (1.0 / t_dim as f64).sqrt()), true),
            b1: store.add(format!("{prefix}.b1"), Mat::zeros(1, hidden), false),
            w2: store.add(format!("{prefix}.w2"), randn(rng, hidden, out, (1.0 / hidden as f64).sqrt()), true),
            b2: store.add(format!("{prefix}.b2"), Mat::zeros(1, out), false),
            t_dim,
        }
    }

    pub(crate) fn forward<F: Real>(&self, g: &mut Graph<F>, t: usize) -> Result<Var> {
        let feats = timestep_embedding(t, self.t_dim)?;
        let x = g.constant(Mat::from_vec(1, self.t_dim, feats.into_iter().map(F::of).collect()));
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.silu(h);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let o = g.matmul(h, w2);
        Ok(g.add_row(o, b2))
    }
}

/// Linear patch projection with the timestep embedding added to every
/// flattened patch before the projection.
#[derive(Clone, Debug)]
pub struct LinearCodec {
    time: TimeMlp,
    enc_w: ParamId,
    enc_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

#[derive(Clone, Debug)]
pub enum CodecImpl {
    Linear(LinearCodec),
    Unet(UNetCodec),
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub geometry: PatchConfig,
    inner: CodecImpl,
    /// `[n, d]` learned embedding of each patch's grid position, added to
    /// the encoder output.
    position: ParamId,
}

impl Codec {
    pub fn new<F: Real, R: Rng + ?Sized>(config: &CodecConfig, model_dim: usize, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        let geometry = config.patch_config(model_dim)?;
        if config.t_dim == 0 || config.t_dim % 2 != 0 {
            return Err(Error::OddDim(config.t_dim));
        }
        let inner = match config.kind {
            CodecKind::Linear => {
                let pd = geometry.patch_dim();
                let time = TimeMlp::new(store, rng, "codec.time", config.t_dim, model_dim, pd);
                CodecImpl::Linear(LinearCodec {
                    time,
                    enc_w: store.add("codec.enc.w", randn(rng, pd, model_dim, (1.0 / pd as f64).sqrt()), true),
                    enc_b: store.add("codec.enc.b", Mat::zeros(1, model_dim), false),
                    dec_w: store.add("codec.dec.w", randn(rng, model_dim, pd, (1.0 / model_dim as f64).sqrt()), true),
                    dec_b: store.add("codec.dec.b", Mat::zeros(1, pd), false),
                })
            }
            CodecKind::Unet => CodecImpl::Unet(UNetCodec::new(config, geometry, store, rng)?),
        };
        let position = store.add("codec.position", randn(rng, geometry.num_patches(), model_dim, 1.0), true);
        Ok(Self { config: config.clone(), geometry, inner, position })
    }

    pub fn kind(&self) -> CodecKind {
        self.config.kind
    }

    pub fn num_patches(&self) -> usize {
        self.geometry.num_patches()
    }

    pub fn output_layout(&self) -> OutputLayout {
        match self.inner {
            CodecImpl::Linear(_) => OutputLayout::Patches,
            CodecImpl::Unet(_) => OutputLayout::Pixels,
        }
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let g = &self.geometry;
        let want = [g.channels, g.height, g.width];
        if img.shape() != want {
            return Err(Error::ShapeMismatch { expected: want.to_vec(), actual: img.shape().to_vec() });
        }
        Ok(())
    }

    /// Maps a noised image at timestep `t` to `n` transformer vectors.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, x_t: &Image, t: usize) -> Result<EncodedImage> {
        self.check_image(x_t)?;
        let mut encoded = match &self.inner {
            CodecImpl::Linear(c) => {
                let patches = g.constant(patch_matrix(x_t, self.geometry.patch_size)?);
                let temb = c.time.forward(g, t)?;
                let h = g.add_row(patches, temb);
                let w = g.param(c.enc_w);
                let b = g.param(c.enc_b);
                let v = g.matmul(h, w);
                let vectors = g.add_row(v, b);
                EncodedImage { vectors, skips: Vec::new(), temb: None }
            }
            CodecImpl::Unet(u) => u.encode(g, &pixel_matrix(x_t), t)?,
        };
        let position = g.param(self.position);
        encoded.vectors = g.add(encoded.vectors, position);
        Ok(encoded)
    }

    /// Maps `n` transformer output vectors back to a noise prediction laid
    /// out per [`Codec::output_layout`].
    pub fn decode<F: Real>(&self, g: &mut Graph<F>, vectors: Var, encoded: &EncodedImage) -> Result<Var> {
        let n = g.value(vectors).rows;
        if n != self.num_patches() {
            return Err(Error::CountMismatch { expected: self.num_patches(), actual: n });
        }
        match &self.inner {
            CodecImpl::Linear(c) => {
                let w = g.param(c.dec_w);
                let b = g.param(c.dec_b);
                let o = g.matmul(vectors, w);
                Ok(g.add_row(o, b))
            }
            CodecImpl::Unet(u) => u.decode(g, vectors, encoded),
        }
    }

    /// The noise target arranged like the decoder output.
    pub fn target_matrix<F: Real>(&self, eps: &Image) -> Result<Mat<F>> {
        match self.output_layout() {
            OutputLayout::Patches => patch_matrix(eps, self.geometry.patch_size),
            OutputLayout::Pixels => Ok(pixel_matrix(eps)),
        }
    }

    /// Converts a decoder output matrix to a `C x H x W` image.
    pub fn output_image<F: Real>(&self, m: &Mat<F>) -> Result<Image> {
        let geo = &self.geometry;
        match self.output_layout() {
            OutputLayout::Patches => {
                let patches: Vec<Vec<f32>> =
                    (0..m.rows).map(|r| m.row(r).iter().map(|v| v.as_f64() as f32).collect()).collect();
                unpatchify(&patches, geo.patch_size, geo.channels, geo.height, geo.width)
            }
            OutputLayout::Pixels => Ok(image_from_pixel_matrix(m, geo.channels, geo.height, geo.width)),
        }
    }
}
