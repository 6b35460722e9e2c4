//! Run configuration: a TOML file with one section per command, dotted-path
//! overrides from the command line, and path checks before anything runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lmgrow::data::{MixSpec, Rule};
use lmgrow::eval::{PromptTemplate, ScoringMode};
use lmgrow::growth::GrowthPlan;
use lmgrow::model::ModelConfig;
use lmgrow::train::{KtoConfig, TrainConfig};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub model: Option<ModelConfig>,
    pub grow: Option<GrowSection>,
    pub filter: Option<FilterSection>,
    pub pretrain: Option<PretrainSection>,
    pub sft: Option<SftSection>,
    pub kto: Option<KtoSection>,
    pub cache_logits: Option<CacheSection>,
    pub eval: Option<EvalSection>,
}

fn default_tolerance() -> f32 {
    1e-4
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowSection {
    pub base: PathBuf,
    #[serde(default)]
    pub plan: GrowthPlan,
    /// Relative depth growth; sets `plan.new_layers` to
    /// `round(layers × depth_fraction)`.
    pub depth_fraction: Option<f64>,
    /// Largest logit divergence accepted from a function-preserving plan.
    #[serde(default = "default_tolerance")]
    pub tolerance: f32,
}

fn jsonl() -> String {
    "jsonl".into()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub input: PathBuf,
    #[serde(default = "jsonl")]
    pub format: String,
    #[serde(default)]
    pub strict: bool,
    pub rules: Option<Vec<Rule>>,
}

fn default_budget() -> u64 {
    100_000
}

fn default_seq_len() -> usize {
    128
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub checkpoint: PathBuf,
    /// Mask-schedule sidecar written by `grow`.
    pub schedule: Option<PathBuf>,
    /// JSONL corpus per language tag.
    pub corpora: BTreeMap<String, PathBuf>,
    pub mix: Option<MixSpec>,
    #[serde(default = "default_budget")]
    pub budget_tokens: u64,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KtoSection {
    pub checkpoint: PathBuf,
    /// Frozen reference; the starting checkpoint when absent.
    pub reference: Option<PathBuf>,
    pub data: PathBuf,
    /// Reference log-prob store written by `cache-logits`.
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub kto: KtoConfig,
}

fn cache_name() -> PathBuf {
    PathBuf::from("ref_logits.bin")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    pub reference: PathBuf,
    pub data: PathBuf,
    /// File name under the output directory.
    #[serde(default = "cache_name")]
    pub output: PathBuf,
}

fn five() -> usize {
    5
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: PathBuf,
    pub items: PathBuf,
    /// Exemplar pool; the `dev` split of `items` when absent.
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "five")]
    pub k: usize,
    #[serde(default)]
    pub mode: ScoringMode,
    #[serde(default)]
    pub template: PromptTemplate,
}

/// A parsed configuration together with the text it was hashed from.
#[derive(Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub hash: String,
    pub resolved: serde_json::Value,
}

fn parse_scalar(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

/// Sets `path` (dotted) to `value` inside `root`, creating tables on the way.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override path {path:?}")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {path:?}: {k} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_scalar(value.trim()));
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads `path`, applies `overrides` and resolves relative input paths
    /// against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Loaded, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let resolved = serde_json::to_value(&table).map_err(|e| CliError::Config(e.to_string()))?;
        let hash = hex(&Sha256::digest(serde_json::to_vec(&resolved).expect("json")));
        let mut config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let at = e.path().to_string();
            CliError::Config(format!("{}: at `{at}`: {}", path.display(), e.inner()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(Loaded {
            config,
            hash,
            resolved,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(g) = &mut self.grow {
            resolve(base, &mut g.base);
        }
        if let Some(f) = &mut self.filter {
            resolve(base, &mut f.input);
        }
        if let Some(p) = &mut self.pretrain {
            resolve(base, &mut p.checkpoint);
            if let Some(s) = &mut p.schedule {
                resolve(base, s);
            }
            for v in p.corpora.values_mut() {
                resolve(base, v);
            }
        }
        if let Some(s) = &mut self.sft {
            resolve(base, &mut s.checkpoint);
            resolve(base, &mut s.data);
        }
        if let Some(k) = &mut self.kto {
            resolve(base, &mut k.checkpoint);
            resolve(base, &mut k.data);
            for p in [&mut k.reference, &mut k.cache].into_iter().flatten() {
                resolve(base, p);
            }
        }
        if let Some(c) = &mut self.cache_logits {
            resolve(base, &mut c.reference);
            resolve(base, &mut c.data);
        }
        if let Some(e) = &mut self.eval {
            resolve(base, &mut e.checkpoint);
            resolve(base, &mut e.items);
            if let Some(d) = &mut e.dev {
                resolve(base, d);
            }
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fails with a configuration error unless every path exists.
pub fn require_paths<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<(), CliError> {
    for p in paths {
        if !p.exists() {
            return Err(CliError::Config(format!("path does not exist: {}", p.display())));
        }
    }
    Ok(())
}

/// The section a command needs, or a configuration error naming it.
pub fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    s.as_ref()
        .ok_or_else(|| CliError::Config(format!("config has no [{name}] section")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_and_replace() {
        let mut t: toml::Table = toml::from_str("seed = 1\n[sft.train]\nsteps = 3\n").unwrap();
        apply_override(&mut t, "seed=9").unwrap();
        apply_override(&mut t, "sft.train.learning_rate=0.5").unwrap();
        apply_override(&mut t, "eval.mode=continuation").unwrap();
        assert_eq!(t["seed"].as_integer(), Some(9));
        assert_eq!(t["sft"]["train"]["learning_rate"].as_float(), Some(0.5));
        assert_eq!(t["sft"]["train"]["steps"].as_integer(), Some(3));
        assert_eq!(t["eval"]["mode"].as_str(), Some("continuation"));
        assert!(apply_override(&mut t, "seed.x=1").is_err());
        assert!(apply_override(&mut t, "novalue").is_err());
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[sft]\ncheckpoint = \"a\"\ndata = \"b\"\n[sft.train]\nlr = 1\n").unwrap();
        let err = RunConfig::load(&p, &[]).unwrap_err().to_string();
        assert!(err.contains("sft.train") && err.contains("lr"), "{err}");
    }

    #[test]
    fn hash_tracks_overrides_and_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 1\n[grow]\nbase = \"base.ckpt\"\n").unwrap();
        let a = RunConfig::load(&p, &[]).unwrap();
        let b = RunConfig::load(&p, &["seed=2".into()]).unwrap();
        assert_ne!(a.hash, b.hash);
        assert_eq!(a.hash, RunConfig::load(&p, &[]).unwrap().hash);
        assert_eq!(a.config.grow.unwrap().base, dir.path().join("base.ckpt"));
    }
}
