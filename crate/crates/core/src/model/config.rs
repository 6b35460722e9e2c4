use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_rope_base() -> f32 {
    500_000.0
}

fn default_rms_eps() -> f32 {
    1e-5
}

fn default_max_seq() -> usize {
    2048
}

/// Geometry of a Llama-style decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub attn_heads: usize,
    pub kv_heads: usize,
    pub vocab_size: usize,
    pub head_dim: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f32,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
}

impl ModelConfig {
    /// Small geometry with the default rope base, eps and context length.
    pub fn toy(
        layers: usize,
        model_dim: usize,
        ffn_dim: usize,
        attn_heads: usize,
        kv_heads: usize,
        vocab_size: usize,
    ) -> Self {
        ModelConfig {
            layers,
            model_dim,
            ffn_dim,
            attn_heads,
            kv_heads,
            vocab_size,
            head_dim: model_dim / attn_heads.max(1),
            rope_base: default_rope_base(),
            rms_eps: default_rms_eps(),
            max_seq: default_max_seq(),
        }
    }

    /// The 70B-class base geometry the 102B model grows from. Vocabulary is
    /// the 128,000 entries reported for the grown model; growth never
    /// touches it.
    pub fn base_70b() -> Self {
        ModelConfig {
            max_seq: 8192,
            ..Self::toy(80, 8192, 28_672, 64, 8, 128_000)
        }
    }

    /// The grown 102B geometry: 96 layers, d=9216, ffn=30720, 72 heads,
    /// 8 kv heads, head_dim 128.
    pub fn grown_102b() -> Self {
        ModelConfig {
            max_seq: 8192,
            ..Self::toy(96, 9216, 30_720, 72, 8, 128_000)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("attn_heads", self.attn_heads),
            ("kv_heads", self.kv_heads),
            ("vocab_size", self.vocab_size),
            ("head_dim", self.head_dim),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim != self.attn_heads * self.head_dim {
            return Err(Error::Config(format!(
                "model_dim {} != attn_heads {} x head_dim {}",
                self.model_dim, self.attn_heads, self.head_dim
            )));
        }
        if self.attn_heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "attn_heads {} is not a multiple of kv_heads {}",
                self.attn_heads, self.kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim
            )));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        if !(self.rms_eps > 0.0 && self.rms_eps.is_finite()) {
            return Err(Error::Config("rms_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Query heads sharing one kv head.
    pub fn group_size(&self) -> usize {
        self.attn_heads / self.kv_heads
    }

    /// Parameters in one decoder block.
    pub fn block_params(&self) -> u64 {
        let d = self.model_dim as u64;
        let kv = self.kv_dim() as u64;
        let f = self.ffn_dim as u64;
        2 * d * d + 2 * d * kv + 3 * d * f + 2 * d
    }

    /// Exact parameter total with untied input/output embeddings:
    /// `2·V·d + L·(2d² + 2d·kv·hd + 3d·ffn + 2d) + d`.
    pub fn count_params(&self) -> u64 {
        let d = self.model_dim as u64;
        let v = self.vocab_size as u64;
        2 * v * d + self.layers as u64 * self.block_params() + d
    }
}

/// Free-function form of [`ModelConfig::count_params`].
pub fn count_params(config: &ModelConfig) -> u64 {
    config.count_params()
}
