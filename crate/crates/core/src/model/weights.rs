use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the normal draw for every projection and embedding.
pub const INIT_STD: f32 = 0.02;

/// One decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gain: Tensor,
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    pub ffn_norm_gain: Tensor,
    pub gate_proj: Tensor,
    pub up_proj: Tensor,
    pub down_proj: Tensor,
}

impl LayerWeights {
    pub const NAMES: [&'static str; 9] = [
        "attn_norm_gain",
        "q_proj",
        "k_proj",
        "v_proj",
        "o_proj",
        "ffn_norm_gain",
        "gate_proj",
        "up_proj",
        "down_proj",
    ];

    /// Tensors in [`NAMES`](Self::NAMES) order.
    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm_gain,
            &self.q_proj,
            &self.k_proj,
            &self.v_proj,
            &self.o_proj,
            &self.ffn_norm_gain,
            &self.gate_proj,
            &self.up_proj,
            &self.down_proj,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm_gain,
            &mut self.q_proj,
            &mut self.k_proj,
            &mut self.v_proj,
            &mut self.o_proj,
            &mut self.ffn_norm_gain,
            &mut self.gate_proj,
            &mut self.up_proj,
            &mut self.down_proj,
        ]
    }

    pub(crate) fn from_array(t: [Tensor; 9]) -> Self {
        let [attn_norm_gain, q_proj, k_proj, v_proj, o_proj, ffn_norm_gain, gate_proj, up_proj, down_proj] =
            t;
        LayerWeights {
            attn_norm_gain,
            q_proj,
            k_proj,
            v_proj,
            o_proj,
            ffn_norm_gain,
            gate_proj,
            up_proj,
            down_proj,
        }
    }

    /// Shapes in [`NAMES`](Self::NAMES) order.
    pub fn shapes(config: &ModelConfig) -> [Vec<usize>; 9] {
        let d = config.model_dim;
        let kv = config.kv_dim();
        let f = config.ffn_dim;
        let qw = config.attn_heads * config.head_dim;
        [
            vec![d],
            vec![d, qw],
            vec![d, kv],
            vec![d, kv],
            vec![qw, d],
            vec![d],
            vec![d, f],
            vec![d, f],
            vec![f, d],
        ]
    }

    /// A block drawn from the standard initialisation.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let shapes = Self::shapes(config);
        let t = shapes.map(|s| {
            if s.len() == 1 {
                Tensor::ones(&s)
            } else {
                Tensor::randn(&s, 0.0, INIT_STD, rng)
            }
        });
        Self::from_array(t)
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// All parameters of a decoder with untied input and output embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub token_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Tensor,
    pub output_head: Tensor,
}

fn layer_name(i: usize, name: &str) -> String {
    format!("layers.{i}.{name}")
}

impl TransformerWeights {
    /// Every tensor paired with its canonical name, in a fixed order:
    /// embedding, blocks in depth order, final norm, output head.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 + 9 * self.layers.len() + 1);
        out.push(("token_embedding".to_string(), &self.token_embedding));
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerWeights::NAMES.iter().zip(layer.tensors()) {
                out.push((layer_name(i, name), t));
            }
        }
        out.push(("final_norm_gain".to_string(), &self.final_norm_gain));
        out.push(("output_head".to_string(), &self.output_head));
        out
    }

    /// Tensors in [`named`](Self::named) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(3 + 9 * self.layers.len());
        out.push(&mut self.token_embedding);
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.output_head);
        out
    }

    /// Expected `(name, shape)` pairs for `config`, in [`named`](Self::named) order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![(
            "token_embedding".to_string(),
            vec![config.vocab_size, config.model_dim],
        )];
        for i in 0..config.layers {
            for (name, s) in LayerWeights::NAMES.iter().zip(LayerWeights::shapes(config)) {
                out.push((layer_name(i, name), s));
            }
        }
        out.push(("final_norm_gain".to_string(), vec![config.model_dim]));
        out.push((
            "output_head".to_string(),
            vec![config.model_dim, config.vocab_size],
        ));
        out
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if self.layers.len() != config.layers {
            return Err(Error::Config(format!(
                "weights have {} layers, config says {}",
                self.layers.len(),
                config.layers
            )));
        }
        for ((name, t), (_, want)) in self.named().iter().zip(Self::expected_shapes(config)) {
            if t.shape() != want.as_slice() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, config implies {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Assembles weights from a name map, requiring every expected name
    /// exactly once and nothing else.
    pub fn from_named(config: &ModelConfig, mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Config(format!("missing tensor {name}")))
        };
        let token_embedding = take("token_embedding")?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let mut t = Vec::with_capacity(9);
            for name in LayerWeights::NAMES {
                t.push(take(&layer_name(i, name))?);
            }
            let t: [Tensor; 9] = t.try_into().expect("nine tensors");
            layers.push(LayerWeights::from_array(t));
        }
        let final_norm_gain = take("final_norm_gain")?;
        let output_head = take("output_head")?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Config(format!("unexpected tensor {extra}")));
        }
        let w = TransformerWeights {
            token_embedding,
            layers,
            final_norm_gain,
            output_head,
        };
        w.validate(config)?;
        Ok(w)
    }

    pub fn numel(&self) -> u64 {
        self.tensors().iter().map(|t| t.numel() as u64).sum()
    }
}

/// Draws fresh weights: projections and embeddings from `N(0, 0.02²)`,
/// norm gains at 1.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<TransformerWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let token_embedding = Tensor::randn(
        &[config.vocab_size, config.model_dim],
        0.0,
        INIT_STD,
        &mut rng,
    );
    let layers = (0..config.layers)
        .map(|_| LayerWeights::init(config, &mut rng))
        .collect();
    let output_head = Tensor::randn(
        &[config.model_dim, config.vocab_size],
        0.0,
        INIT_STD,
        &mut rng,
    );
    Ok(TransformerWeights {
        token_embedding,
        layers,
        final_norm_gain: Tensor::ones(&[config.model_dim]),
        output_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig::toy(2, 16, 32, 4, 2, 64)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&toy(), 7).unwrap();
        let b = init_model(&toy(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_model(&toy(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gains_start_at_one() {
        let w = init_model(&toy(), 0).unwrap();
        for (name, t) in w.named() {
            if name.ends_with("gain") {
                assert!(t.data().iter().all(|&g| g == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn tensor_sizes_sum_to_closed_form() {
        let c = toy();
        let w = init_model(&c, 0).unwrap();
        assert_eq!(w.numel(), c.count_params());
        w.validate(&c).unwrap();
    }

    #[test]
    fn names_are_unique() {
        let w = init_model(&toy(), 0).unwrap();
        let names: std::collections::BTreeSet<_> = w.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), w.named().len());
        assert!(names.contains("layers.1.k_proj"));
    }

    #[test]
    fn from_named_rejects_missing_and_extra() {
        let c = toy();
        let w = init_model(&c, 0).unwrap();
        let map: BTreeMap<String, Tensor> =
            w.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(TransformerWeights::from_named(&c, map.clone()).unwrap(), w);
        let mut missing = map.clone();
        missing.remove("layers.0.v_proj");
        assert!(TransformerWeights::from_named(&c, missing).is_err());
        let mut extra = map;
        extra.insert("bogus".into(), Tensor::ones(&[1]));
        assert!(TransformerWeights::from_named(&c, extra).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let c = ModelConfig { kv_heads: 3, ..toy() };
        assert!(matches!(init_model(&c, 0), Err(Error::Config(_))));
    }
}
