use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Which channels of a width-expanded model are new.
///
/// New hidden channels are `[base_model_dim, model_dim)`, new FFN units are
/// `[base_ffn_dim, ffn_dim)`. Heads are listed individually because new
/// heads are interleaved into their kv groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthLayout {
    pub base_model_dim: usize,
    pub base_ffn_dim: usize,
    pub new_heads: Vec<bool>,
}

impl WidthLayout {
    /// A layout with nothing new.
    pub fn identity(config: &ModelConfig) -> Self {
        WidthLayout {
            base_model_dim: config.model_dim,
            base_ffn_dim: config.ffn_dim,
            new_heads: vec![false; config.attn_heads],
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.base_model_dim > config.model_dim
            || self.base_ffn_dim > config.ffn_dim
            || self.new_heads.len() != config.attn_heads
        {
            return Err(Error::Contract(format!(
                "mask layout (d {}, ffn {}, {} heads) does not fit model (d {}, ffn {}, {} heads)",
                self.base_model_dim,
                self.base_ffn_dim,
                self.new_heads.len(),
                config.model_dim,
                config.ffn_dim,
                config.attn_heads
            )));
        }
        Ok(())
    }

    fn split<T: Element>(len: usize, base: usize, m: f32) -> Vec<T> {
        (0..len)
            .map(|i| if i < base { T::one() } else { T::widen(m) })
            .collect()
    }

    /// Per-channel multipliers over the hidden width at mask value `m`.
    pub fn hidden<T: Element>(&self, model_dim: usize, m: f32) -> Vec<T> {
        Self::split(model_dim, self.base_model_dim, m)
    }

    pub fn ffn<T: Element>(&self, ffn_dim: usize, m: f32) -> Vec<T> {
        Self::split(ffn_dim, self.base_ffn_dim, m)
    }

    /// Per-channel multipliers over the concatenated head outputs.
    pub fn heads<T: Element>(&self, head_dim: usize, m: f32) -> Vec<T> {
        self.new_heads
            .iter()
            .flat_map(|&new| {
                let v = if new { T::widen(m) } else { T::one() };
                std::iter::repeat(v).take(head_dim)
            })
            .collect()
    }
}

/// Mask values in effect for one forward pass.
///
/// `embed` scales the new channels of the token embedding, `layers[l]`
/// scales everything new inside block `l` and `final_norm` weights the new
/// channels in the last normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Masks {
    pub layout: WidthLayout,
    pub embed: f32,
    pub layers: Vec<f32>,
    pub final_norm: f32,
}

impl Masks {
    /// Every stage at the same value `m`.
    pub fn uniform(layout: WidthLayout, layers: usize, m: f32) -> Self {
        Masks {
            layout,
            embed: m,
            layers: vec![m; layers],
            final_norm: m,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.layout.validate(config)?;
        if self.layers.len() != config.layers {
            return Err(Error::Contract(format!(
                "{} layer masks for a {}-layer model",
                self.layers.len(),
                config.layers
            )));
        }
        let all = std::iter::once(self.embed)
            .chain(self.layers.iter().copied())
            .chain(std::iter::once(self.final_norm));
        for m in all {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Contract(format!("mask value {m} outside [0, 1]")));
            }
        }
        Ok(())
    }
}
