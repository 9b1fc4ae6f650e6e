use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::patch::{CodecConfig, CodecKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: u32,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub codec: CodecConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset("tiny").expect("built-in preset")
    }
}

impl ModelConfig {
    /// Named sizes, smallest first.
    ///
    /// | name   | layers | d   | heads | ffn |
    /// |--------|--------|-----|-------|-----|
    /// | probe  | 2      | 16  | 2     | 32  |
    /// | tiny   | 2      | 64  | 4     | 172 |
    /// | small  | 3      | 96  | 4     | 256 |
    /// | medium | 4      | 128 | 4     | 344 |
    /// | large  | 4      | 256 | 8     | 688 |
    ///
    /// `probe` is the gradient-check model: 16-token vocabulary, one 4x4
    /// image with 2x2 patches.
    pub fn preset(name: &str) -> Result<Self> {
        let text = Vocab::text().size();
        let base = |layers, d_model, heads, ffn_hidden| Self {
            vocab_size: text,
            d_model,
            layers,
            heads,
            ffn_hidden,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            codec: CodecConfig::default(),
        };
        Ok(match name {
            "probe" => Self {
                vocab_size: 16,
                codec: CodecConfig {
                    kind: CodecKind::Linear,
                    patch_size: 2,
                    channels: 3,
                    image_hw: 4,
                    t_dim: 8,
                    unet_widths: vec![4],
                },
                ..base(2, 16, 2, 32)
            },
            "tiny" => base(2, 64, 4, 172),
            "small" => base(3, 96, 4, 256),
            "medium" => base(4, 128, 4, 344),
            "large" => base(4, 256, 8, 688),
            other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size <= crate::data::vocab::NUM_RESERVED {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.d_model % self.heads != 0 || (self.d_model / self.heads) % 2 != 0 {
            return bad(format!("d_model {} must split into {} even-width heads", self.d_model, self.heads));
        }
        self.codec.patch_config(self.d_model)?;
        Ok(())
    }
}
