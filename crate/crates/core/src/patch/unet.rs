//! U-Net down/up blocks used as the patch encoder/decoder.
//!
//! Activations are `[pixels, channels]` matrices. Each resolution stage is
//! two residual conv blocks followed by 2x average pooling; `log2(k)` stages
//! bring an `H x W` image down to the `(H/k) x (W/k)` patch grid. A
//! single-head self-attention block over the whole grid sits at the bottom.
//! Decoding mirrors the stages with nearest upsampling and concatenated
//! skips.

use rand::Rng;

use super::codec::{CodecConfig, EncodedImage, TimeMlp};
use super::PatchConfig;
use crate::error::{Error, Result};
use crate::tensor::{randn, Graph, Mat, ParamId, ParamStore, Real, Var};

const LN_EPS: f64 = 1e-5;
/// Scale of the second conv in each residual block relative to He init, so
/// fresh blocks start close to the identity.
const RESIDUAL_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Mat::filled(1, width, F::one()), false),
            bias: store.add(format!("{name}.bias"), Mat::zeros(1, width), false),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R, name: &str, fan_in: usize, out: usize, scale: f64) -> Self {
        Self {
            w: store.add(format!("{name}.w"), randn(rng, fan_in, out, scale * (1.0 / fan_in as f64).sqrt()), true),
            b: store.add(format!("{name}.b"), Mat::zeros(1, out), false),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// 3x3 convolution with weights stored as `[9*cin, cout]`.
    fn conv<F: Real>(&self, g: &mut Graph<F>, x: Var, height: usize, width: usize) -> Var {
        let cols = g.im2col(x, height, width);
        self.forward(g, cols)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Dense,
    time: Dense,
    norm2: Norm,
    conv2: Dense,
    skip: Option<Dense>,
}

impl ResBlock {
    fn new<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R, name: &str, cin: usize, cout: usize, t_hidden: usize) -> Self {
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), cin),
            conv1: Dense::new(store, rng, &format!("{name}.conv1"), 9 * cin, cout, 1.0),
            time: Dense::new(store, rng, &format!("{name}.time"), t_hidden, cout, 1.0),
            norm2: Norm::new(store, &format!("{name}.norm2"), cout),
            conv2: Dense::new(store, rng, &format!("{name}.conv2"), 9 * cout, cout, RESIDUAL_INIT_SCALE),
            skip: (cin != cout).then(|| Dense::new(store, rng, &format!("{name}.skip"), cin, cout, 1.0)),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, temb: Var, height: usize, width: usize) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.conv(g, h, height, width);
        let t = self.time.forward(g, temb);
        let h = g.add_row(h, t);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.conv(g, h, height, width);
        let residual = match &self.skip {
            Some(proj) => proj.forward(g, x),
            None => x,
        };
        g.add(residual, h)
    }
}

#[derive(Clone, Debug)]
struct MidAttention {
    norm: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

impl MidAttention {
    fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Var {
        let h = self.norm.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        // bidirectional over the grid, independent of the sequence mask
        let a = g.attention(q, k, v, 1, None);
        let o = self.o.forward(g, a);
        g.add(x, o)
    }
}

#[derive(Clone, Debug)]
pub struct UNetCodec {
    geometry: PatchConfig,
    time: TimeMlp,
    conv_in: Dense,
    down: Vec<[ResBlock; 2]>,
    mid: MidAttention,
    to_model: Dense,
    from_model: Dense,
    /// Indexed by stage, shallowest first; applied deepest first.
    up: Vec<[ResBlock; 2]>,
    out_norm: Norm,
    conv_out: Dense,
}

fn stage_width(widths: &[usize], s: usize) -> usize {
    widths[s.min(widths.len() - 1)]
}

impl UNetCodec {
    pub fn new<F: Real, R: Rng + ?Sized>(config: &CodecConfig, geometry: PatchConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        let k = geometry.patch_size;
        if !k.is_power_of_two() {
            return Err(Error::Config(format!("U-Net codec needs a power-of-two patch size, got {k}")));
        }
        if config.unet_widths.is_empty() || config.unet_widths.contains(&0) {
            return Err(Error::Config("unet_widths must be non-empty and positive".into()));
        }
        let stages = k.trailing_zeros() as usize;
        let widths = &config.unet_widths;
        let t_hidden = stage_width(widths, 0) * 2;
        let c = geometry.channels;
        let time = TimeMlp::new(store, rng, "codec.time", config.t_dim, t_hidden, t_hidden);
        let w0 = stage_width(widths, 0);
        let conv_in = Dense::new(store, rng, "codec.conv_in", 9 * c, w0, 1.0);
        let mut down = Vec::with_capacity(stages);
        let mut cur = w0;
        for s in 0..stages {
            let w = stage_width(widths, s);
            down.push([
                ResBlock::new(store, rng, &format!("codec.down{s}.0"), cur, w, t_hidden),
                ResBlock::new(store, rng, &format!("codec.down{s}.1"), w, w, t_hidden),
            ]);
            cur = w;
        }
        let bottom = cur;
        let mid = MidAttention {
            norm: Norm::new(store, "codec.mid.norm", bottom),
            q: Dense::new(store, rng, "codec.mid.q", bottom, bottom, 1.0),
            k: Dense::new(store, rng, "codec.mid.k", bottom, bottom, 1.0),
            v: Dense::new(store, rng, "codec.mid.v", bottom, bottom, 1.0),
            o: Dense::new(store, rng, "codec.mid.o", bottom, bottom, RESIDUAL_INIT_SCALE),
        };
        let d = geometry.model_dim;
        let to_model = Dense::new(store, rng, "codec.to_model", bottom, d, 1.0);
        let from_model = Dense::new(store, rng, "codec.from_model", d, bottom, 1.0);
        let mut up: Vec<[ResBlock; 2]> = Vec::with_capacity(stages);
        let mut cur_up = bottom;
        let mut up_rev = Vec::with_capacity(stages);
        for s in (0..stages).rev() {
            let w = stage_width(widths, s);
            up_rev.push((
                s,
                [
                    ResBlock::new(store, rng, &format!("codec.up{s}.0"), cur_up + w, w, t_hidden),
                    ResBlock::new(store, rng, &format!("codec.up{s}.1"), w, w, t_hidden),
                ],
            ));
            cur_up = w;
        }
        up_rev.sort_by_key(|(s, _)| *s);
        up.extend(up_rev.into_iter().map(|(_, b)| b));
        let out_norm = Norm::new(store, "codec.out_norm", cur_up);
        let conv_out = Dense::new(store, rng, "codec.conv_out", 9 * cur_up, c, 1.0);
        Ok(Self { geometry, time, conv_in, down, mid, to_model, from_model, up, out_norm, conv_out })
    }

    pub(crate) fn encode<F: Real>(&self, g: &mut Graph<F>, pixels: &Mat<F>, t: usize) -> Result<EncodedImage> {
        let (mut h, mut w) = (self.geometry.height, self.geometry.width);
        let temb = self.time.forward(g, t)?;
        let temb = g.silu(temb);
        let x = g.constant(pixels.clone());
        let mut x = self.conv_in.conv(g, x, h, w);
        let mut skips = Vec::with_capacity(self.down.len());
        for blocks in &self.down {
            for b in blocks {
                x = b.forward(g, x, temb, h, w);
            }
            skips.push(x);
            x = g.avg_pool2(x, h, w);
            h /= 2;
            w /= 2;
        }
        let x = self.mid.forward(g, x);
        let vectors = self.to_model.forward(g, x);
        Ok(EncodedImage { vectors, skips, temb: Some(temb) })
    }

    pub(crate) fn decode<F: Real>(&self, g: &mut Graph<F>, vectors: Var, enc: &EncodedImage) -> Result<Var> {
        if enc.skips.len() != self.down.len() {
            return Err(Error::MissingSkips);
        }
        let temb = enc.temb.ok_or(Error::MissingSkips)?;
        let (gh, gw) = self.geometry.grid();
        let (mut h, mut w) = (gh, gw);
        let mut x = self.from_model.forward(g, vectors);
        for (s, blocks) in self.up.iter().enumerate().rev() {
            x = g.upsample2(x, h, w);
            h *= 2;
            w *= 2;
            let skip = enc.skips[s];
            if g.value(skip).rows != h * w {
                return Err(Error::MissingSkips);
            }
            x = g.concat_cols(x, skip);
            for b in blocks {
                x = b.forward(g, x, temb, h, w);
            }
        }
        let x = self.out_norm.forward(g, x);
        let x = g.silu(x);
        Ok(self.conv_out.conv(g, x, h, w))
    }
}
