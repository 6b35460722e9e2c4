use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::plan::{check_width, WidthTargets};
use super::schedule::{MaskSchedule, ScheduleConfig};
use crate::error::Result;
use crate::model::{LayerWeights, ModelConfig, TransformerWeights, WidthLayout, INIT_STD};
use crate::tensor::Tensor;

/// Head slots after growth. Each kv group keeps its original heads first,
/// followed by its share of the new heads, so query head `h` still reads
/// kv head `h / group_size`.
pub fn head_layout(config: &ModelConfig, new_heads: usize) -> Vec<bool> {
    let old_g = config.group_size();
    let new_g = new_heads / config.kv_heads;
    (0..new_heads)
        .map(|h| h % new_g >= old_g)
        .collect()
}

/// New slot of each original head.
fn head_slots(config: &ModelConfig, new_heads: usize) -> Vec<usize> {
    let old_g = config.group_size();
    let new_g = new_heads / config.kv_heads;
    (0..config.attn_heads)
        .map(|h| (h / old_g) * new_g + h % old_g)
        .collect()
}

/// Channel map for the concatenated head outputs.
fn head_channels(slots: &[usize], head_dim: usize) -> Vec<usize> {
    slots
        .iter()
        .flat_map(|&s| (0..head_dim).map(move |e| s * head_dim + e))
        .collect()
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// A fresh `[rows × cols]` normal draw with `src[i][j]` copied to
/// `[row_map[i]][col_map[j]]`.
fn enlarge_matrix(
    src: &Tensor,
    rows: usize,
    cols: usize,
    row_map: &[usize],
    col_map: &[usize],
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let mut out = Tensor::randn(&[rows, cols], 0.0, INIT_STD, rng);
    let sc = src.shape()[1];
    let data = out.data_mut();
    for (i, &r) in row_map.iter().enumerate() {
        for (j, &c) in col_map.iter().enumerate() {
            data[r * cols + c] = src.data()[i * sc + j];
        }
    }
    out
}

fn enlarge_gain(src: &Tensor, len: usize) -> Tensor {
    let mut out = Tensor::ones(&[len]);
    out.data_mut()[..src.numel()].copy_from_slice(src.data());
    out
}

/// Widens every weight matrix to `targets`. Original values keep their
/// positions (heads move to their interleaved slots); new entries come from
/// the standard initialisation and new gains start at 1. The returned
/// schedule starts with every new channel masked.
pub fn expand_width_msg(
    weights: &TransformerWeights,
    config: &ModelConfig,
    targets: WidthTargets,
    schedule: ScheduleConfig,
    seed: u64,
) -> Result<(TransformerWeights, ModelConfig, MaskSchedule)> {
    weights.validate(config)?;
    check_width(config, &targets, true, true)?;
    let grown = ModelConfig {
        model_dim: targets.model_dim,
        ffn_dim: targets.ffn_dim,
        attn_heads: targets.attn_heads,
        ..config.clone()
    };
    let (d, d2) = (config.model_dim, grown.model_dim);
    let (f, f2) = (config.ffn_dim, grown.ffn_dim);
    let hd = config.head_dim;
    let q2 = grown.attn_heads * hd;
    let kv = config.kv_dim();
    let hid = identity(d);
    let ffn = identity(f);
    let kvc = identity(kv);
    let heads = head_channels(&head_slots(config, grown.attn_heads), hd);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = config.vocab_size;
    let token_embedding =
        enlarge_matrix(&weights.token_embedding, vocab, d2, &identity(vocab), &hid, &mut rng);
    let layers = weights
        .layers
        .iter()
        .map(|l| {
            LayerWeights::from_array([
                enlarge_gain(&l.attn_norm_gain, d2),
                enlarge_matrix(&l.q_proj, d2, q2, &hid, &heads, &mut rng),
                enlarge_matrix(&l.k_proj, d2, kv, &hid, &kvc, &mut rng),
                enlarge_matrix(&l.v_proj, d2, kv, &hid, &kvc, &mut rng),
                enlarge_matrix(&l.o_proj, q2, d2, &heads, &hid, &mut rng),
                enlarge_gain(&l.ffn_norm_gain, d2),
                enlarge_matrix(&l.gate_proj, d2, f2, &hid, &ffn, &mut rng),
                enlarge_matrix(&l.up_proj, d2, f2, &hid, &ffn, &mut rng),
                enlarge_matrix(&l.down_proj, f2, d2, &ffn, &hid, &mut rng),
            ])
        })
        .collect();
    let output_head =
        enlarge_matrix(&weights.output_head, d2, vocab, &hid, &identity(vocab), &mut rng);
    let w = TransformerWeights {
        token_embedding,
        layers,
        final_norm_gain: enlarge_gain(&weights.final_norm_gain, d2),
        output_head,
    };
    let layout = WidthLayout {
        base_model_dim: d,
        base_ffn_dim: f,
        new_heads: head_layout(config, grown.attn_heads),
    };
    let schedule = MaskSchedule::new(schedule, layout, grown.layers)?;
    Ok((w, grown, schedule))
}
