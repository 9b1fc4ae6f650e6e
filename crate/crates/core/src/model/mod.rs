//! One transformer over mixed sequences: token embeddings for discrete
//! positions, codec vectors for patch positions, an LM head for logits and
//! the codec decoder for noise predictions.

mod config;
pub mod loss;

pub use config::ModelConfig;
pub use loss::{
    batch_gradients, batch_loss, ddpm_loss, lm_loss, transfusion_loss, LossPlan, LossReport, PositionRole,
    TrainingExample,
};

use rand::Rng;

use crate::data::{Element, Image, Span};
use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::patch::{Codec, EncodedImage};
use crate::tensor::{randn, Graph, Mat, ParamId, ParamStore, Real, Var};

#[derive(Clone, Debug)]
struct Layer {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

/// An image occupying a span of the input, at diffusion timestep `t`
/// (`t = 0` for clean images).
#[derive(Clone, Copy, Debug)]
pub struct ImageInput<'a> {
    pub x_t: &'a Image,
    pub t: usize,
}

/// Result of [`TransfusionModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[L, d]` final-normed hidden states.
    pub hidden: Var,
    pub encoded: Vec<EncodedImage>,
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug)]
pub struct TransfusionModel<F: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub codec: Codec,
    tok_emb: ParamId,
    layers: Vec<Layer>,
    final_norm: ParamId,
    lm_head: ParamId,
}

impl<F: Real> TransfusionModel<F> {
    /// Builds a randomly initialized model.
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size as usize;
        let mut p = ParamStore::new();
        let tok_emb = p.add("tok_emb", randn(rng, v, d, 1.0), true);
        let std = (1.0 / d as f64).sqrt();
        let out_std = std / (2.0 * config.layers as f64).sqrt();
        let ff = config.ffn_hidden;
        let layers = (0..config.layers)
            .map(|i| Layer {
                attn_norm: p.add(format!("layers.{i}.attn_norm"), Mat::filled(1, d, F::one()), false),
                wq: p.add(format!("layers.{i}.wq"), randn(rng, d, d, std), true),
                wk: p.add(format!("layers.{i}.wk"), randn(rng, d, d, std), true),
                wv: p.add(format!("layers.{i}.wv"), randn(rng, d, d, std), true),
                wo: p.add(format!("layers.{i}.wo"), randn(rng, d, d, out_std), true),
                mlp_norm: p.add(format!("layers.{i}.mlp_norm"), Mat::filled(1, d, F::one()), false),
                w_gate: p.add(format!("layers.{i}.w_gate"), randn(rng, d, ff, std), true),
                w_up: p.add(format!("layers.{i}.w_up"), randn(rng, d, ff, std), true),
                w_down: p.add(
                    format!("layers.{i}.w_down"),
                    randn(rng, ff, d, (1.0 / ff as f64).sqrt() / (2.0 * config.layers as f64).sqrt()),
                    true,
                ),
            })
            .collect();
        let final_norm = p.add("final_norm", Mat::filled(1, d, F::one()), false);
        let lm_head = p.add("lm_head", randn(rng, d, v, std), true);
        let codec = Codec::new(&config.codec, d, &mut p, rng)?;
        Ok(Self { config: config.clone(), params: p, codec, tok_emb, layers, final_norm, lm_head })
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<G: Real>(&self) -> TransfusionModel<G> {
        TransfusionModel {
            config: self.config.clone(),
            params: self.params.cast(),
            codec: self.codec.clone(),
            tok_emb: self.tok_emb,
            layers: self.layers.clone(),
            final_norm: self.final_norm,
            lm_head: self.lm_head,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Parameters belonging to the patch codec.
    pub fn codec_param_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.param(id).name.starts_with("codec.")).collect()
    }

    /// Parameter count excluding the codec and embeddings, i.e. the
    /// transformer body.
    pub fn transformer_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("layers.") || p.name == "final_norm")
            .map(|p| p.value.len())
            .sum()
    }

    pub fn patches_per_image(&self) -> usize {
        self.codec.num_patches()
    }

    /// Runs the transformer over `elements`.
    ///
    /// Discrete positions embed their token id; each span in `spans` is
    /// filled with the codec encoding of the matching entry of `images`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        elements: &[Element],
        spans: &[Span],
        images: &[ImageInput<'_>],
        mask: &AttentionMask,
    ) -> Result<ForwardPass> {
        let len = elements.len();
        if mask.len() != len {
            return Err(Error::LayoutMaskMismatch { mask: mask.len(), sequence: len });
        }
        if spans.len() != images.len() {
            return Err(Error::MalformedSequence(format!("{} spans but {} images", spans.len(), images.len())));
        }
        let n = self.patches_per_image();
        // row of the stacked [tokens; image0; image1; ...] matrix for each position
        let mut token_ids = Vec::new();
        let mut order = vec![usize::MAX; len];
        for (pos, e) in elements.iter().enumerate() {
            if let Element::Token(id) = e {
                if *id >= self.config.vocab_size {
                    return Err(Error::MalformedSequence(format!("token {id} outside vocabulary")));
                }
                order[pos] = token_ids.len();
                token_ids.push(*id as usize);
            }
        }
        let mut offset = token_ids.len();
        for span in spans {
            if span.end() > len {
                return Err(Error::SpanOutOfBounds { start: span.start, len: span.len, total: len });
            }
            if span.len != n {
                return Err(Error::CountMismatch { expected: n, actual: span.len });
            }
            for (i, pos) in span.positions().enumerate() {
                order[pos] = offset + i;
            }
            offset += n;
        }
        if let Some(pos) = order.iter().position(|&o| o == usize::MAX) {
            return Err(Error::MalformedSequence(format!("patch element at {pos} outside every span")));
        }

        let mut parts = Vec::with_capacity(1 + images.len());
        if !token_ids.is_empty() {
            let table = g.param(self.tok_emb);
            parts.push(g.gather_rows(table, &token_ids));
        }
        let mut encoded = Vec::with_capacity(images.len());
        for img in images {
            let enc = self.codec.encode(g, img.x_t, img.t)?;
            parts.push(enc.vectors);
            encoded.push(enc);
        }
        if parts.is_empty() {
            return Err(Error::MalformedSequence("empty input".into()));
        }
        let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let mut h = g.gather_rows(stacked, &order);

        let positions: Vec<usize> = (0..len).collect();
        let cfg = &self.config;
        for layer in &self.layers {
            let gain = g.param(layer.attn_norm);
            let x = g.rms_norm(h, gain, cfg.norm_eps);
            let wq = g.param(layer.wq);
            let wk = g.param(layer.wk);
            let wv = g.param(layer.wv);
            let q = g.matmul(x, wq);
            let k = g.matmul(x, wk);
            let v = g.matmul(x, wv);
            let q = g.rope(q, cfg.heads, &positions, cfg.rope_base);
            let k = g.rope(k, cfg.heads, &positions, cfg.rope_base);
            let a = g.attention(q, k, v, cfg.heads, Some(mask.as_shared()));
            let wo = g.param(layer.wo);
            let o = g.matmul(a, wo);
            h = g.add(h, o);

            let gain = g.param(layer.mlp_norm);
            let x = g.rms_norm(h, gain, cfg.norm_eps);
            let wg = g.param(layer.w_gate);
            let wu = g.param(layer.w_up);
            let gate = g.matmul(x, wg);
            let up = g.matmul(x, wu);
            let m = g.swiglu(gate, up);
            let wd = g.param(layer.w_down);
            let m = g.matmul(m, wd);
            h = g.add(h, m);
        }
        let gain = g.param(self.final_norm);
        let hidden = g.rms_norm(h, gain, cfg.norm_eps);
        Ok(ForwardPass { hidden, encoded, spans: spans.to_vec() })
    }

    /// `[positions.len(), vocab]` logits.
    pub fn logits(&self, g: &mut Graph<F>, pass: &ForwardPass, positions: &[usize]) -> Var {
        let rows = g.gather_rows(pass.hidden, positions);
        let head = g.param(self.lm_head);
        g.matmul(rows, head)
    }

    /// Noise prediction for image `image`, in the codec's output layout.
    pub fn eps_hat(&self, g: &mut Graph<F>, pass: &ForwardPass, image: usize) -> Result<Var> {
        let span = pass.spans[image];
        let positions: Vec<usize> = span.positions().collect();
        let rows = g.gather_rows(pass.hidden, &positions);
        self.codec.decode(g, rows, &pass.encoded[image])
    }
}
