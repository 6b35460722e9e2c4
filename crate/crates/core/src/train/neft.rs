use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-width of the NEFTune noise for an `[l × d]` embedding block.
pub fn neft_bound(alpha: f32, l: usize, d: usize) -> f32 {
    alpha / ((l * d) as f32).sqrt()
}

/// Uniform noise in `[−α/√(L·d), α/√(L·d)]`, shaped `[l × d]`.
pub fn neft_noise(l: usize, d: usize, alpha: f32, seed: u64) -> Result<Tensor> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Contract(format!("neft alpha must be >= 0, got {alpha}")));
    }
    let bound = neft_bound(alpha, l, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(&[l, d], |_| {
        if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        }
    }))
}

/// `embeddings` plus NEFTune noise; with `alpha = 0` the input is returned
/// unchanged.
pub fn neftune_noise(embeddings: &Tensor, alpha: f32, seed: u64) -> Result<Tensor> {
    let (l, d) = embeddings.matrix_dims("neftune")?;
    if alpha == 0.0 {
        return Ok(embeddings.clone());
    }
    let noise = neft_noise(l, d, alpha, seed)?;
    let mut out = embeddings.clone();
    for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
        *o += n;
    }
    Ok(out)
}
