use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use super::Document;

/// NFC normalisation with every whitespace run collapsed to one space and
/// the ends trimmed.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn content_hash(text: &str) -> [u8; 32] {
    Sha256::digest(normalize(text).as_bytes()).into()
}

/// Remembers normalised texts already seen.
#[derive(Debug, Default)]
pub struct ExactDedup {
    seen: HashSet<[u8; 32]>,
}

impl ExactDedup {
    pub fn new() -> Self {
        Self::default()
    }

    /// True the first time a normalised text is offered.
    pub fn insert(&mut self, text: &str) -> bool {
        self.seen.insert(content_hash(text))
    }
}

/// Keeps the first occurrence of every normalised text.
pub fn exact_dedup(docs: Vec<Document>) -> Vec<Document> {
    let mut d = ExactDedup::new();
    docs.into_iter().filter(|doc| d.insert(&doc.text)).collect()
}

pub const DEFAULT_SHINGLE: usize = 13;
pub const DEFAULT_THRESHOLD: f64 = 0.8;
const BANDS: usize = 32;
const ROWS: usize = 4;
const MERSENNE_61: u64 = (1 << 61) - 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Hashes of the overlapping `n`-character windows of the normalised text.
/// Texts shorter than `n` characters form a single shingle.
pub fn shingles(text: &str, n: usize) -> HashSet<u64> {
    let norm = normalize(text);
    let bounds: Vec<usize> = norm
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(norm.len()))
        .collect();
    let chars = bounds.len() - 1;
    if chars <= n {
        return HashSet::from([fnv1a(norm.as_bytes())]);
    }
    (0..=chars - n)
        .map(|i| fnv1a(&norm.as_bytes()[bounds[i]..bounds[i + n]]))
        .collect()
}

pub fn jaccard(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Near-duplicate detector: MinHash signatures bucketed by LSH bands, with
/// every candidate confirmed by exact Jaccard similarity of shingle sets.
#[derive(Debug)]
pub struct NearDedup {
    n: usize,
    threshold: f64,
    perms: Vec<(u64, u64)>,
    buckets: Vec<HashMap<u64, Vec<usize>>>,
    kept: Vec<HashSet<u64>>,
}

impl NearDedup {
    pub fn new(n: usize, threshold: f64) -> Self {
        // Fixed seed: signatures must not depend on run configuration.
        let mut rng = ChaCha8Rng::seed_from_u64(0x006d_696e_6861_7368);
        let perms = (0..BANDS * ROWS)
            .map(|_| (rng.random_range(1..MERSENNE_61), rng.random_range(0..MERSENNE_61)))
            .collect();
        NearDedup {
            n: n.max(1),
            threshold,
            perms,
            buckets: vec![HashMap::new(); BANDS],
            kept: Vec::new(),
        }
    }

    fn signature(&self, set: &HashSet<u64>) -> Vec<u64> {
        self.perms
            .iter()
            .map(|&(a, b)| {
                set.iter()
                    .map(|&h| {
                        let x = (h % MERSENNE_61) as u128;
                        ((a as u128 * x + b as u128) % MERSENNE_61 as u128) as u64
                    })
                    .min()
                    .unwrap_or(u64::MAX)
            })
            .collect()
    }

    fn band_keys(sig: &[u64]) -> Vec<u64> {
        sig.chunks(ROWS)
            .map(|rows| {
                let bytes: Vec<u8> = rows.iter().flat_map(|r| r.to_le_bytes()).collect();
                fnv1a(&bytes)
            })
            .collect()
    }

    /// Records `text` unless it is a near-duplicate of one already kept;
    /// returns whether it was kept.
    pub fn insert(&mut self, text: &str) -> bool {
        let set = shingles(text, self.n);
        let keys = Self::band_keys(&self.signature(&set));
        let mut candidates: Vec<usize> = keys
            .iter()
            .zip(&self.buckets)
            .filter_map(|(k, b)| b.get(k))
            .flatten()
            .copied()
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        if candidates
            .iter()
            .any(|&c| jaccard(&set, &self.kept[c]) >= self.threshold)
        {
            return false;
        }
        let idx = self.kept.len();
        for (k, b) in keys.into_iter().zip(&mut self.buckets) {
            b.entry(k).or_default().push(idx);
        }
        self.kept.push(set);
        true
    }
}

/// Keeps the first of every group of near-duplicates.
pub fn ngram_dedup(docs: Vec<Document>, n: usize, threshold: f64) -> Vec<Document> {
    let mut d = NearDedup::new(n, threshold);
    docs.into_iter().filter(|doc| d.insert(&doc.text)).collect()
}
