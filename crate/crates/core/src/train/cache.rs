//! Append-only store of reference log-probabilities.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! header   magic "LMGRLOGC" (8 bytes) | version u32 | fingerprint [u8; 32]
//! record*  key [u8; 32] | n u32 | n × f32
//! ```
//!
//! The fingerprint hashes the reference model's configuration, weights and
//! tokenizer. A store is only ever opened against an expected fingerprint,
//! and a mismatch is an error rather than a silent reuse of stale values.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::tokenizer::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerWeights};

pub const CACHE_MAGIC: &[u8; 8] = b"LMGRLOGC";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32;

/// Content hash of a model and the tokenizer it reads.
pub fn model_fingerprint(config: &ModelConfig, weights: &TransformerWeights) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"lmgrow-reference");
    h.update(format!("byte-tokenizer/{VOCAB_SIZE}").as_bytes());
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for (name, t) in weights.named() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Key of one (example, prompt, completion) under a fingerprint.
pub fn cache_key(fingerprint: &[u8; 32], id: &str, prompt: &[usize], completion: &[usize]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(fingerprint);
    h.update((id.len() as u64).to_le_bytes());
    h.update(id.as_bytes());
    for seq in [prompt, completion] {
        h.update((seq.len() as u64).to_le_bytes());
        for &t in seq {
            h.update((t as u32).to_le_bytes());
        }
    }
    h.finalize().into()
}

#[derive(Debug)]
pub struct LogitCache {
    path: PathBuf,
    fingerprint: [u8; 32],
    entries: HashMap<[u8; 32], Vec<f32>>,
    writer: BufWriter<File>,
}

fn invalid(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::CacheInvalid(format!("{}: {what}", path.display()))
}

impl LogitCache {
    /// Creates an empty store, replacing any file at `path`.
    pub fn create(path: &Path, fingerprint: [u8; 32]) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(f);
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(CACHE_MAGIC);
        header.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        header.extend_from_slice(&fingerprint);
        writer.write_all(&header).map_err(|e| Error::io(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(LogitCache {
            path: path.to_path_buf(),
            fingerprint,
            entries: HashMap::new(),
            writer,
        })
    }

    /// Loads a store written for `expected`.
    pub fn open(path: &Path, expected: &[u8; 32]) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < HEADER_LEN || &bytes[..8] != CACHE_MAGIC {
            return Err(invalid(path, "not a logit cache"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CACHE_VERSION {
            return Err(invalid(path, format!("unsupported version {version}")));
        }
        let fingerprint: [u8; 32] = bytes[12..HEADER_LEN].try_into().expect("32 bytes");
        if &fingerprint != expected {
            return Err(invalid(path, "model fingerprint does not match the reference model"));
        }
        let mut entries = HashMap::new();
        let mut at = HEADER_LEN;
        while at < bytes.len() {
            if bytes.len() - at < 36 {
                return Err(invalid(path, format!("truncated record at byte {at}")));
            }
            let key: [u8; 32] = bytes[at..at + 32].try_into().expect("32 bytes");
            let n = u32::from_le_bytes(bytes[at + 32..at + 36].try_into().expect("4 bytes")) as usize;
            at += 36;
            if bytes.len() - at < 4 * n {
                return Err(invalid(path, format!("truncated record at byte {at}")));
            }
            let values: Vec<f32> = bytes[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(invalid(path, "non-finite value"));
            }
            at += 4 * n;
            entries.insert(key, values);
        }
        let f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(LogitCache {
            path: path.to_path_buf(),
            fingerprint,
            entries,
            writer: BufWriter::new(f),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key(&self, id: &str, prompt: &[usize], completion: &[usize]) -> [u8; 32] {
        cache_key(&self.fingerprint, id, prompt, completion)
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<&[f32]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    /// Appends a record; an identical existing record is left alone.
    pub fn insert(&mut self, key: [u8; 32], values: Vec<f32>) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("refusing to cache non-finite log-probabilities".into()));
        }
        if self.entries.get(&key) == Some(&values) {
            return Ok(());
        }
        let path = &self.path;
        let mut rec = Vec::with_capacity(36 + 4 * values.len());
        rec.extend_from_slice(&key);
        rec.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in &values {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        self.writer.write_all(&rec).map_err(|e| Error::io(path, e))?;
        self.entries.insert(key, values);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        let path = &self.path;
        self.writer.flush().map_err(|e| Error::io(path, e))
    }
}

impl Drop for LogitCache {
    fn drop(&mut self) {
        if let Err(e) = self.writer.flush() {
            log::error!("{}: failed to flush logit cache: {e}", self.path.display());
        }
    }
}
