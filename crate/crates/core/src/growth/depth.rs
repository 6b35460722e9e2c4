use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::plan::{check_positions, default_positions, depthup_overlap};
use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig, TransformerWeights};
use crate::tensor::Tensor;

fn positions_or_default(config: &ModelConfig, new_layers: usize, positions: Option<&[usize]>) -> Result<Vec<usize>> {
    let p = match positions {
        Some(p) => p.to_vec(),
        None => default_positions(config.layers, new_layers)?,
    };
    check_positions(config.layers, new_layers, &p)?;
    Ok(p)
}

/// Interleaves new blocks: `make(k, prev)` builds the block inserted at
/// `positions[k]`, where `prev` is the original block it follows (block 0
/// when inserted at the front).
fn insert_blocks(
    weights: &TransformerWeights,
    config: &ModelConfig,
    positions: &[usize],
    mut make: impl FnMut(&LayerWeights) -> LayerWeights,
) -> Result<(TransformerWeights, ModelConfig)> {
    weights.validate(config)?;
    let mut layers = Vec::with_capacity(config.layers + positions.len());
    let mut next = positions.iter().peekable();
    for i in 0..=config.layers {
        while next.peek() == Some(&&i) {
            next.next();
            let prev = &weights.layers[i.saturating_sub(1)];
            layers.push(make(prev));
        }
        if i < config.layers {
            layers.push(weights.layers[i].clone());
        }
    }
    let grown = ModelConfig {
        layers: layers.len(),
        ..config.clone()
    };
    let w = TransformerWeights {
        token_embedding: weights.token_embedding.clone(),
        layers,
        final_norm_gain: weights.final_norm_gain.clone(),
        output_head: weights.output_head.clone(),
    };
    Ok((w, grown))
}

/// Inserts `new_layers` copies of preceding blocks with their attention
/// output and FFN down projections zeroed, so each new block is an exact
/// identity on the residual stream.
pub fn expand_depth_llamapro(
    weights: &TransformerWeights,
    config: &ModelConfig,
    new_layers: usize,
    positions: Option<&[usize]>,
) -> Result<(TransformerWeights, ModelConfig)> {
    let positions = positions_or_default(config, new_layers, positions)?;
    insert_blocks(weights, config, &positions, |prev| {
        let mut b = prev.clone();
        b.o_proj = Tensor::zeros(b.o_proj.shape());
        b.down_proj = Tensor::zeros(b.down_proj.shape());
        b
    })
}

/// Mean and standard deviation of every value of one parameter group
/// pooled over all blocks.
pub fn group_statistics(weights: &TransformerWeights) -> [(f64, f64); 9] {
    std::array::from_fn(|g| {
        let (mut n, mut sum, mut sq) = (0usize, 0f64, 0f64);
        for l in &weights.layers {
            for &v in l.tensors()[g].data() {
                n += 1;
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        let mean = sum / n.max(1) as f64;
        let var = (sq / n.max(1) as f64 - mean * mean).max(0.0);
        (mean, var.sqrt())
    })
}

/// Inserts blocks whose entries are drawn from `N(μ̂, σ̂²)`, the pooled
/// statistics of the corresponding parameter group across base blocks.
pub fn expand_normal_init(
    weights: &TransformerWeights,
    config: &ModelConfig,
    new_layers: usize,
    positions: Option<&[usize]>,
    seed: u64,
) -> Result<(TransformerWeights, ModelConfig)> {
    let positions = positions_or_default(config, new_layers, positions)?;
    let stats = group_statistics(weights);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = LayerWeights::shapes(config);
    insert_blocks(weights, config, &positions, |_| {
        let mut g = 0;
        let t = shapes.clone().map(|s| {
            let (mean, std) = stats[g];
            g += 1;
            let n: usize = s.iter().product();
            let data = if std > 0.0 {
                let dist = Normal::new(mean, std).expect("finite statistics");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            } else {
                vec![mean as f32; n]
            };
            Tensor::new(s, data).expect("shape matches")
        });
        LayerWeights::from_array(t)
    })
}

/// Grows to `layers + new_layers` blocks as `[0, L−m) ++ [m, L)`.
pub fn expand_depthup(
    weights: &TransformerWeights,
    config: &ModelConfig,
    new_layers: usize,
) -> Result<(TransformerWeights, ModelConfig)> {
    weights.validate(config)?;
    if new_layers == 0 {
        return Ok((weights.clone(), config.clone()));
    }
    let l = config.layers;
    let m = depthup_overlap(l, new_layers)?;
    let layers: Vec<LayerWeights> = weights.layers[..l - m]
        .iter()
        .chain(&weights.layers[m..])
        .cloned()
        .collect();
    if layers.len() != l + new_layers {
        return Err(Error::Plan(format!(
            "depth-up produced {} layers, wanted {}",
            layers.len(),
            l + new_layers
        )));
    }
    let grown = ModelConfig {
        layers: layers.len(),
        ..config.clone()
    };
    Ok((
        TransformerWeights {
            layers,
            ..weights.clone()
        },
        grown,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn toy(layers: usize) -> (ModelConfig, TransformerWeights) {
        let c = ModelConfig::toy(layers, 16, 32, 4, 2, 20);
        let w = init_model(&c, 11).unwrap();
        (c, w)
    }

    #[test]
    fn llamapro_adds_one_block_of_params() {
        let (c, w) = toy(4);
        let (g, gc) = expand_depth_llamapro(&w, &c, 1, None).unwrap();
        assert_eq!(gc.layers, 5);
        assert_eq!(gc.count_params() - c.count_params(), c.block_params());
        assert_eq!(g.numel(), gc.count_params());
        // Inserted at the end, copying block 3.
        assert_eq!(g.layers[4].q_proj, w.layers[3].q_proj);
        assert!(g.layers[4].o_proj.data().iter().all(|&v| v == 0.0));
        assert!(g.layers[4].down_proj.data().iter().all(|&v| v == 0.0));
        assert_eq!(&g.layers[..4], &w.layers[..]);
    }

    #[test]
    fn llamapro_positions_map_originals() {
        let (c, w) = toy(4);
        let (g, _) = expand_depth_llamapro(&w, &c, 2, Some(&[0, 2])).unwrap();
        // new, 0, 1, new, 2, 3
        assert_eq!(g.layers[1], w.layers[0]);
        assert_eq!(g.layers[2], w.layers[1]);
        assert_eq!(g.layers[4], w.layers[2]);
        assert_eq!(g.layers[5], w.layers[3]);
        assert_eq!(g.layers[0].gate_proj, w.layers[0].gate_proj);
        assert_eq!(g.layers[3].gate_proj, w.layers[1].gate_proj);
        assert!(matches!(
            expand_depth_llamapro(&w, &c, 1, Some(&[5])),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn depthup_splice() {
        let (c, w) = toy(8);
        let (g, gc) = expand_depthup(&w, &c, 4).unwrap();
        assert_eq!(gc.layers, 12);
        for i in 0..6 {
            assert_eq!(g.layers[i], w.layers[i]);
            assert_eq!(g.layers[6 + i], w.layers[2 + i]);
        }
        let (same, sc) = expand_depthup(&w, &c, 0).unwrap();
        assert_eq!(same, w);
        assert_eq!(sc, c);
        assert!(expand_depthup(&w, &c, 3).is_err());
    }

    #[test]
    fn normal_init_keeps_base_blocks() {
        let (c, w) = toy(4);
        let (g, gc) = expand_normal_init(&w, &c, 2, None, 5).unwrap();
        assert_eq!(gc.layers, 6);
        assert_eq!(g.layers[0], w.layers[0]);
        assert_eq!(g.layers[1], w.layers[1]);
        assert_eq!(g.layers[3], w.layers[2]);
        assert_eq!(g.layers[4], w.layers[3]);
        assert!(g.layers[2].attn_norm_gain.data().iter().all(|&v| v == 1.0));
        assert_ne!(g.layers[2].q_proj, w.layers[1].q_proj);
    }
}
