//! Single-file checkpoints.
//!
//! Layout: an 8-byte little-endian manifest length, a JSON manifest, then
//! the raw little-endian `f32` payload. Offsets in the manifest are byte
//! offsets into the payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "lmgrow-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn save(path: &Path, config: &ModelConfig, weights: &TransformerWeights) -> Result<()> {
    weights.validate(config)?;
    let mut offset = 0u64;
    let tensors = weights
        .named()
        .into_iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for t in weights.tensors() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads the manifest only.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_header(path, &mut r)
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<Manifest> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| format_err(path, "truncated manifest length"))?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 32 {
        return Err(format_err(path, format!("implausible manifest length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| format_err(path, "truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| format_err(path, format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(format_err(
            path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    Ok(manifest)
}

pub fn load(path: &Path) -> Result<(ModelConfig, TransformerWeights)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let manifest = read_header(path, &mut r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for e in manifest.tensors {
        if e.dtype != "f32" {
            return Err(format_err(path, format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| format_err(path, format!("{}: data past end of file", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(e.shape, data)?;
        if map.insert(e.name.clone(), t).is_some() {
            return Err(format_err(path, format!("duplicate tensor {}", e.name)));
        }
    }
    let weights = TransformerWeights::from_named(&manifest.config, map)?;
    Ok((manifest.config, weights))
}
