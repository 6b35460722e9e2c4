//! Named sub-seeds, so that independent consumers of randomness never share
//! a stream and adding one consumer does not shift the others.

use sha2::{Digest, Sha256};

/// A 64-bit seed derived from `seed` and `label`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
