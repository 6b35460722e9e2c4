//! Command implementations. Each one reads its section of the run
//! configuration, writes artifacts under the output directory and records
//! them in `manifest.json`.
//!
//! Sub-seeds: every random choice draws from `derive_seed(seed, label)` with
//! label `init`, `grow`, `mix`, `pretrain`, `sft`, `kto` or `eval`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lmgrow::data::{filter_chain, ingest_all, tokenize, InputFormat, MixItem, Rule};
use lmgrow::data::{mix_sampler, FilterReport};
use lmgrow::eval::{evaluate, load_mcq, EvalConfig, EvalReport, Split};
use lmgrow::growth::{grow_pipeline, DepthStrategy, GrowthReport, MaskSchedule};
use lmgrow::model::{checkpoint, init_model, Model, ModelConfig, TransformerWeights};
use lmgrow::par::Execution;
use lmgrow::seed::derive_seed;
use lmgrow::train::{
    cache_ref_logits, kto_train, load_instructions, load_preferences, pretrain as run_pretrain, sft as run_sft,
    write_metrics, FrozenReference, LogitCache, RefSource, TrainConfig, TrainOutcome,
};
use serde_json::{json, Value};

use crate::config::{require_paths, section, RunConfig};
use crate::{CliError, RunArgs};

pub const MANIFEST: &str = "manifest.json";

/// A loaded configuration and the artifacts a command has written so far.
pub struct Run {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
    artifacts: BTreeMap<String, String>,
    summary: serde_json::Map<String, Value>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn artifact(&mut self, kind: &str, name: &str) -> PathBuf {
        self.artifacts.insert(kind.to_string(), name.to_string());
        self.path(name)
    }

    fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.summary.insert(key.to_string(), value.into());
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Loads the configuration, runs `body` and updates the manifest. The
/// manifest is written even when `body` fails after producing artifacts.
pub fn run(command: &str, args: &RunArgs, body: fn(&mut Run) -> Result<(), CliError>) -> Result<(), CliError> {
    let loaded = RunConfig::load(&args.config, &args.overrides)?;
    let root = args.out_root.clone().unwrap_or_default();
    let out = root.join(&loaded.config.output_dir);
    fs::create_dir_all(&out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut run = Run {
        seed: loaded.config.seed,
        config: loaded.config,
        out,
        artifacts: BTreeMap::new(),
        summary: serde_json::Map::new(),
    };
    let result = body(&mut run);
    if matches!(result, Err(CliError::Config(_))) && run.artifacts.is_empty() {
        return result;
    }
    let manifest_path = run.path(MANIFEST);
    let mut manifest: Value = if manifest_path.exists() {
        read_json(&manifest_path).unwrap_or_else(|_| json!({}))
    } else {
        json!({})
    };
    if !manifest.is_object() {
        manifest = json!({});
    }
    let mut entry = json!({
        "command": command,
        "version": env!("LMGROW_VERSION"),
        "config_path": args.config.display().to_string(),
        "config_hash": loaded.hash,
        "config": loaded.resolved,
        "seed": run.seed,
        "artifacts": run.artifacts,
        "summary": run.summary,
        "status": if result.is_ok() { "ok" } else { "failed" },
    });
    if let Err(e) = &result {
        entry["error"] = Value::String(e.to_string());
    }
    manifest
        .as_object_mut()
        .expect("object")
        .entry("runs")
        .or_insert_with(|| json!({}))
        .as_object_mut()
        .ok_or_else(|| runtime(format!("{}: `runs` is not an object", manifest_path.display())))?
        .insert(command.to_string(), entry);
    write_json(&manifest_path, &manifest)?;
    result
}

fn load_checkpoint(path: &Path) -> Result<(ModelConfig, TransformerWeights), CliError> {
    require_paths([&path.to_path_buf()])?;
    Ok(checkpoint::load(path)?)
}

/// The section's training settings with the command's sub-seed applied.
fn seeded(train: &TrainConfig, seed: u64, label: &str, field: &str) -> Result<TrainConfig, CliError> {
    if train.seed != 0 {
        return Err(CliError::Config(format!(
            "{field}.seed: training seeds derive from the top-level `seed`"
        )));
    }
    Ok(TrainConfig {
        seed: derive_seed(seed, label),
        ..train.clone()
    })
}

fn finish_training(run: &mut Run, label: &str, config: &ModelConfig, outcome: &TrainOutcome) -> Result<(), CliError> {
    let ckpt = run.artifact("checkpoint", &format!("{label}.ckpt"));
    checkpoint::save(&ckpt, config, &outcome.weights)?;
    let metrics = run.artifact("metrics", &format!("{label}_metrics.jsonl"));
    write_metrics(&metrics, &outcome.log)?;
    run.note("steps", outcome.log.len());
    run.note("skipped_records", outcome.skipped);
    if let (Some(a), Some(b)) = (outcome.first_loss(), outcome.last_loss()) {
        run.note("first_loss", a);
        run.note("last_loss", b);
        println!("{label}: {} steps, loss {a:.4} -> {b:.4}", outcome.log.len());
    }
    if outcome.skipped > 0 {
        println!("{label}: {} records skipped", outcome.skipped);
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

pub fn init(run: &mut Run) -> Result<(), CliError> {
    let config = section(&run.config.model, "model")?.clone();
    config.validate()?;
    let weights = init_model(&config, derive_seed(run.seed, "init"))?;
    let path = run.artifact("checkpoint", "model.ckpt");
    checkpoint::save(&path, &config, &weights)?;
    run.note("params", weights.numel());
    println!("initialised {} parameters, wrote {}", weights.numel(), path.display());
    Ok(())
}

pub fn grow(run: &mut Run) -> Result<(), CliError> {
    let g = section(&run.config.grow, "grow")?.clone();
    let (config, weights) = load_checkpoint(&g.base)?;
    let mut plan = g.plan.clone();
    if let Some(f) = g.depth_fraction {
        if plan.depth_strategy == DepthStrategy::None || plan.depth_strategy == DepthStrategy::Staged {
            return Err(CliError::Config(
                "grow.depth_fraction: needs grow.plan.depth_strategy llamapro, depthup or normal_init".into(),
            ));
        }
        if !(f > 0.0 && f.is_finite()) {
            return Err(CliError::Config(format!("grow.depth_fraction: must be positive, got {f}")));
        }
        plan.new_layers = ((config.layers as f64 * f).round() as usize).max(1);
    }
    let tolerance = g.tolerance;
    let grown = grow_pipeline(&weights, &config, &plan, derive_seed(run.seed, "grow"))?;
    let ckpt = run.artifact("checkpoint", "grown.ckpt");
    checkpoint::save(&ckpt, &grown.config, &grown.weights)?;
    if let Some(s) = &grown.schedule {
        write_json(&run.artifact("schedule", "schedule.json"), s)?;
    }
    write_json(&run.artifact("report", "growth_report.json"), &grown.report)?;
    let r = &grown.report;
    run.note("max_logit_divergence", r.max_logit_divergence as f64);
    run.note("grown_param_count", r.grown_param_count);
    println!(
        "{}: {} -> {} layers, d {} -> {}, {} -> {} parameters",
        r.strategy,
        r.base_config.layers,
        r.grown_config.layers,
        r.base_config.model_dim,
        r.grown_config.model_dim,
        r.base_param_count,
        r.grown_param_count
    );
    println!("max logit divergence {:.3e} (tolerance {tolerance:.1e})", r.max_logit_divergence);
    if plan.preserves_function() && !(r.max_logit_divergence <= tolerance) {
        return Err(CliError::Runtime(format!(
            "function preservation failed: divergence {:.3e} exceeds tolerance {tolerance:.1e}",
            r.max_logit_divergence
        )));
    }
    Ok(())
}

fn default_rules() -> Vec<Rule> {
    ["min_length", "max_length", "charset_ratio", "exact_dedup", "ngram_dedup"]
        .iter()
        .map(|n| Rule::by_name(n).expect("known rule"))
        .collect()
}

pub fn filter(run: &mut Run) -> Result<(), CliError> {
    let f = section(&run.config.filter, "filter")?.clone();
    require_paths([&f.input])?;
    let format: InputFormat = f.format.parse()?;
    let rules = f.rules.clone().unwrap_or_else(default_rules);
    let (docs, malformed) = ingest_all(&f.input, format, f.strict)?;
    let (kept, mut report): (_, FilterReport) = filter_chain(docs, &rules)?;
    report.malformed_skipped = malformed as u64;
    let out = run.artifact("corpus", "filtered.jsonl");
    let file = fs::File::create(&out).map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;
    let mut w = BufWriter::new(file);
    for d in &kept {
        serde_json::to_writer(&mut w, d).map_err(runtime)?;
        w.write_all(b"\n").map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    write_json(&run.artifact("report", "filter_report.json"), &report)?;
    run.note("sample_reduction_pct", report.sample_reduction_pct);
    run.note("volume_reduction_pct", report.volume_reduction_pct);
    print!("{report}");
    Ok(())
}

/// Token windows of `seq_len + 1` cut from the concatenated stream.
fn windows(tokens: &[usize], seq_len: usize) -> Vec<Vec<usize>> {
    tokens
        .chunks(seq_len + 1)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn pretrain(run: &mut Run) -> Result<(), CliError> {
    let p = section(&run.config.pretrain, "pretrain")?.clone();
    require_paths(p.corpora.values().chain(p.schedule.iter()))?;
    if p.corpora.is_empty() {
        return Err(CliError::Config("pretrain.corpora: no corpus given".into()));
    }
    if p.seq_len == 0 {
        return Err(CliError::Config("pretrain.seq_len: must be positive".into()));
    }
    let (config, weights) = load_checkpoint(&p.checkpoint)?;
    let schedule: Option<MaskSchedule> = p.schedule.as_deref().map(read_json).transpose()?;
    let train = seeded(&p.train, run.seed, "pretrain", "pretrain.train")?;
    let mut corpora = BTreeMap::new();
    for (tag, path) in &p.corpora {
        let format = if path.is_dir() {
            InputFormat::TxtDir
        } else {
            InputFormat::Jsonl
        };
        corpora.insert(tag.clone(), ingest_all(path, format, false)?.0);
    }
    let tokens: Vec<usize> = match &p.mix {
        Some(spec) => {
            let items: Vec<MixItem> = mix_sampler(&corpora, spec, derive_seed(run.seed, "mix"), p.budget_tokens)?;
            items.into_iter().flat_map(|i| i.tokens).collect()
        }
        None => corpora
            .values()
            .flatten()
            .flat_map(|d| tokenize(&d.text, true))
            .take(p.budget_tokens as usize)
            .collect(),
    };
    let stream = windows(&tokens, p.seq_len.min(config.max_seq));
    run.note("stream_tokens", tokens.len());
    let outcome = run_pretrain(&weights, &config, &train, &stream, schedule.as_ref())?;
    if let Some(m) = outcome.log.last().and_then(|r| r.mask) {
        run.note("final_mask", m as f64);
        if m < 1.0 {
            log::warn!("width mask is {m} after the last step; the model still depends on the mask");
        }
    }
    finish_training(run, "pretrain", &config, &outcome)
}

pub fn sft(run: &mut Run) -> Result<(), CliError> {
    let s = section(&run.config.sft, "sft")?.clone();
    require_paths([&s.checkpoint, &s.data])?;
    let train = seeded(&s.train, run.seed, "sft", "sft.train")?;
    let (config, weights) = load_checkpoint(&s.checkpoint)?;
    let data = load_instructions(&s.data)?;
    let outcome = run_sft(&weights, &config, &train, &data)?;
    finish_training(run, "sft", &config, &outcome)
}

fn reference_model(path: &Path) -> Result<FrozenReference, CliError> {
    let (config, weights) = load_checkpoint(path)?;
    Ok(FrozenReference::new(Model::new(config, weights)?))
}

pub fn kto(run: &mut Run) -> Result<(), CliError> {
    let k = section(&run.config.kto, "kto")?.clone();
    let reference_path = k.reference.clone().unwrap_or_else(|| k.checkpoint.clone());
    require_paths([&k.checkpoint, &k.data, &reference_path].into_iter().chain(k.cache.iter()))?;
    let train = seeded(&k.train, run.seed, "kto", "kto.train")?;
    k.kto.validate()?;
    let (config, weights) = load_checkpoint(&k.checkpoint)?;
    let data = load_preferences(&k.data)?;
    let reference = reference_model(&reference_path)?;
    let cache = match &k.cache {
        Some(p) => Some(LogitCache::open(p, &reference.fingerprint())?),
        None => None,
    };
    let source = match &cache {
        Some(c) => RefSource::Cache(c),
        None => RefSource::Frozen(&reference),
    };
    let outcome = kto_train(&weights, &config, &train, &k.kto, &data, source)?;
    run.note("reference_forward_passes", reference.forward_passes());
    run.note("cached_reference", cache.is_some());
    finish_training(run, "kto", &config, &outcome)
}

pub fn cache_logits(run: &mut Run) -> Result<(), CliError> {
    let c = section(&run.config.cache_logits, "cache_logits")?.clone();
    require_paths([&c.reference, &c.data])?;
    let name = c.output.to_string_lossy().into_owned();
    let reference = reference_model(&c.reference)?;
    let data = load_preferences(&c.data)?;
    let path = run.artifact("cache", &name);
    let cache = cache_ref_logits(&reference, &data, &path, Execution::Parallel)?;
    run.note("records", cache.len());
    println!("cached {} reference records in {}", cache.len(), path.display());
    Ok(())
}

pub fn eval(run: &mut Run) -> Result<(), CliError> {
    let e = section(&run.config.eval, "eval")?.clone();
    require_paths([&e.checkpoint, &e.items].into_iter().chain(e.dev.iter()))?;
    let (config, weights) = load_checkpoint(&e.checkpoint)?;
    let model = Model::new(config, weights)?;
    let file = load_mcq(&e.items, e.strict)?;
    let (dev_pool, items): (Vec<_>, Vec<_>) = file.items.into_iter().partition(|it| it.split == Split::Dev);
    let dev_pool = match &e.dev {
        Some(p) => load_mcq(p, e.strict)?.items,
        None => dev_pool,
    };
    if items.is_empty() {
        return Err(CliError::Runtime(format!("{}: no test-split items", e.items.display())));
    }
    let cfg = EvalConfig {
        k: e.k,
        mode: e.mode,
        seed: derive_seed(run.seed, "eval"),
        template: e.template.clone(),
        execution: Execution::Parallel,
    };
    let report = evaluate(&model, &items, &dev_pool, &cfg)?;
    write_json(&run.artifact("report", "eval_report.json"), &report)?;
    let table = run.artifact("table", "eval_report.txt");
    fs::write(&table, format!("{report}\n")).map_err(runtime)?;
    run.note("accuracy", report.overall);
    run.note("rejected_records", file.rejected);
    run.note("duplicate_records", file.duplicates);
    println!("{report}");
    Ok(())
}

fn loss_range(path: &Path) -> Result<Option<(usize, f64, f64)>, CliError> {
    let text = fs::read_to_string(path).map_err(runtime)?;
    let losses: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<Value>(l).map(|v| v["loss"].as_f64().unwrap_or(f64::NAN)))
        .collect::<Result<_, _>>()
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(match (losses.first(), losses.last()) {
        (Some(&a), Some(&b)) => Some((losses.len(), a, b)),
        _ => None,
    })
}

/// Prints what a run directory holds.
pub fn report(dir: &Path) -> Result<(), CliError> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("path does not exist: {}", dir.display())));
    }
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        let m: Value = read_json(&manifest)?;
        if let Some(runs) = m["runs"].as_object() {
            for (cmd, r) in runs {
                println!(
                    "{cmd}: {} (config {}, version {})",
                    r["status"].as_str().unwrap_or("?"),
                    r["config_hash"].as_str().map_or("?", |h| &h[..h.len().min(12)]),
                    r["version"].as_str().unwrap_or("?")
                );
            }
        }
    }
    let growth = dir.join("growth_report.json");
    if growth.exists() {
        let r: GrowthReport = read_json(&growth)?;
        println!(
            "\ngrowth ({}): {} -> {} parameters, max logit divergence {:.3e}",
            r.strategy, r.base_param_count, r.grown_param_count, r.max_logit_divergence
        );
    }
    let filter = dir.join("filter_report.json");
    if filter.exists() {
        let r: FilterReport = read_json(&filter)?;
        print!("\nfilter\n{r}");
    }
    for label in ["pretrain", "sft", "kto"] {
        let p = dir.join(format!("{label}_metrics.jsonl"));
        if p.exists() {
            if let Some((n, a, b)) = loss_range(&p)? {
                println!("\n{label}: {n} steps, loss {a:.4} -> {b:.4}");
            }
        }
    }
    let eval = dir.join("eval_report.json");
    if eval.exists() {
        let r: EvalReport = read_json(&eval)?;
        println!("\n{r}");
    }
    Ok(())
}
