use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::cache::{model_fingerprint, LogitCache};
use super::{apply_update, batch_gradients, BatchSampler, Optimizer, StepRecord, TrainConfig, TrainOutcome};
use crate::data::tokenizer::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{bind, build, ForwardOptions, Model, ModelConfig, ParamVars, TransformerWeights};
use crate::par::Execution;
use crate::seed::derive_seed;
use crate::tensor::{Element, Graph, Tensor, Var};

fn lambda_desired() -> f32 {
    1.375
}

fn one() -> f32 {
    1.0
}

fn beta() -> f32 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KtoConfig {
    #[serde(default = "lambda_desired")]
    pub lambda_desired: f32,
    #[serde(default = "one")]
    pub lambda_undesired: f32,
    #[serde(default = "beta")]
    pub beta: f32,
    /// Mismatched pairs per step used to estimate the reference point;
    /// 0 uses one per minibatch example.
    #[serde(default)]
    pub reference_kl_batch: usize,
}

impl Default for KtoConfig {
    fn default() -> Self {
        KtoConfig {
            lambda_desired: lambda_desired(),
            lambda_undesired: one(),
            beta: beta(),
            reference_kl_batch: 0,
        }
    }
}

impl KtoConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f32| x > 0.0 && x.is_finite();
        if !(pos(self.lambda_desired) && pos(self.lambda_undesired) && pos(self.beta)) {
            return Err(Error::Config(format!("kto lambdas and beta must be > 0, got {self:?}")));
        }
        Ok(())
    }

    fn lambda(&self, desirable: bool) -> f32 {
        if desirable {
            self.lambda_desired
        } else {
            self.lambda_undesired
        }
    }
}

/// One unpaired preference record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferenceExample {
    pub id: String,
    pub prompt: Vec<usize>,
    pub completion: Vec<usize>,
    pub desirable: bool,
}

impl PreferenceExample {
    /// `BOS prompt` and `completion EOS`.
    pub fn from_text(id: impl Into<String>, prompt: &str, completion: &str, desirable: bool) -> Self {
        let mut p = vec![BOS];
        p.extend(prompt.bytes().map(usize::from));
        let mut c: Vec<usize> = completion.bytes().map(usize::from).collect();
        c.push(EOS);
        PreferenceExample {
            id: id.into(),
            prompt: p,
            completion: c,
            desirable,
        }
    }
}

#[derive(Deserialize)]
struct PreferenceRecord {
    id: Option<String>,
    prompt: String,
    completion: String,
    desirable: bool,
}

/// Reads `{prompt, completion, desirable}` JSON lines; ids default to
/// `"{file name}:{line}"`.
pub fn load_preferences(path: &Path) -> Result<Vec<PreferenceExample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: PreferenceRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if r.completion.is_empty() {
            return Err(bad("empty completion".into()));
        }
        let id = r.id.unwrap_or_else(|| format!("{name}:{}", i + 1));
        out.push(PreferenceExample::from_text(id, &r.prompt, &r.completion, r.desirable));
    }
    Ok(out)
}

/// KTO loss of one example.
///
/// With `r = β·(policy − reference)`, desirable examples cost
/// `λ_D·(1 − σ(r − z0))` and undesirable ones `λ_U·(1 − σ(z0 − r))`.
pub fn kto_loss(policy_logp: f64, ref_logp: f64, desirable: bool, z0: f64, kcfg: &KtoConfig) -> Result<f64> {
    if ![policy_logp, ref_logp, z0].iter().all(|v| v.is_finite()) {
        return Err(Error::Contract("kto_loss inputs must be finite".into()));
    }
    if z0 < 0.0 {
        return Err(Error::Contract(format!("kto reference point must be >= 0, got {z0}")));
    }
    let r = kcfg.beta as f64 * (policy_logp - ref_logp);
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    Ok(if desirable {
        kcfg.lambda_desired as f64 * (1.0 - sigmoid(r - z0))
    } else {
        kcfg.lambda_undesired as f64 * (1.0 - sigmoid(z0 - r))
    })
}

/// Records the mean KTO loss of a batch whose summed policy log-probs are
/// `policy` (any shape with one entry per example).
pub fn build_kto_loss<T: Element>(
    g: &mut Graph<T>,
    policy: Var,
    ref_logps: &[f32],
    desirable: &[bool],
    z0: f32,
    kcfg: &KtoConfig,
) -> Result<Var> {
    let shape = g.value(policy).shape().to_vec();
    let n = g.value(policy).numel();
    if ref_logps.len() != n || desirable.len() != n {
        return Err(Error::dim("build_kto_loss", &shape, &[ref_logps.len()]));
    }
    if !(z0 >= 0.0 && z0.is_finite()) || ref_logps.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("kto reference values must be finite and z0 >= 0".into()));
    }
    let lit = |v: f32| T::lit(v as f64);
    let reference = g.constant(Tensor::from_parts(shape.clone(), ref_logps.iter().map(|&v| lit(v)).collect()));
    // 1 − σ(x) = σ(−x): desirable examples see −(r − z0), undesirable r − z0.
    let sign = g.constant(Tensor::from_parts(
        shape.clone(),
        desirable.iter().map(|&d| lit(if d { -1.0 } else { 1.0 })).collect(),
    ));
    let lambda = g.constant(Tensor::from_parts(shape, desirable.iter().map(|&d| lit(kcfg.lambda(d))).collect()));
    let diff = g.sub(policy, reference)?;
    let r = g.scale(diff, kcfg.beta as f64);
    let shifted = g.add_scalar(r, -(z0 as f64));
    let signed = g.mul(shifted, sign)?;
    let s = g.sigmoid(signed);
    let weighted = g.mul(s, lambda)?;
    Ok(g.mean(weighted))
}

/// Per-token log-probs of the whole continuation on `g`, plus the index at
/// which the completion's targets start.
fn build_token_logps(
    g: &mut Graph,
    p: &ParamVars,
    config: &ModelConfig,
    prompt: &[usize],
    completion: &[usize],
) -> Result<(Var, usize)> {
    if prompt.is_empty() || completion.is_empty() {
        return Err(Error::Contract("prompt and completion must be non-empty".into()));
    }
    let seq = [prompt, completion].concat();
    let n = seq.len();
    let (logits, _) = build(g, p, config, &seq[..n - 1], ForwardOptions::default())?;
    Ok((g.log_softmax_gather(logits, &seq[1..])?, prompt.len() - 1))
}

/// Summed completion log-prob as a scalar on `g`.
fn build_completion_logp(
    g: &mut Graph,
    p: &ParamVars,
    config: &ModelConfig,
    prompt: &[usize],
    completion: &[usize],
) -> Result<Var> {
    let (lp, start) = build_token_logps(g, p, config, prompt, completion)?;
    let n = g.value(lp).numel();
    let mask = g.constant(Tensor::from_parts(
        vec![n],
        (0..n).map(|t| if t >= start { 1.0 } else { 0.0 }).collect(),
    ));
    let picked = g.mul(lp, mask)?;
    Ok(g.sum(picked))
}

/// Per-token log-probs of `completion` given `prompt`.
pub fn completion_logps(
    weights: &TransformerWeights,
    config: &ModelConfig,
    prompt: &[usize],
    completion: &[usize],
) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let p = bind(&mut g, weights, false);
    let (lp, start) = build_token_logps(&mut g, &p, config, prompt, completion)?;
    let v = g.value(lp).data()[start..].to_vec();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("non-finite completion log-probability".into()));
    }
    Ok(v)
}

fn summed(logps: &[f32]) -> f32 {
    logps.iter().copied().sum()
}

/// A frozen reference model that counts its forward passes.
#[derive(Debug)]
pub struct FrozenReference {
    pub model: Model,
    forwards: AtomicUsize,
}

impl FrozenReference {
    pub fn new(model: Model) -> Self {
        FrozenReference {
            model,
            forwards: AtomicUsize::new(0),
        }
    }

    pub fn forward_passes(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        model_fingerprint(&self.model.config, &self.model.weights)
    }

    pub fn token_logps(&self, prompt: &[usize], completion: &[usize]) -> Result<Vec<f32>> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        completion_logps(&self.model.weights, &self.model.config, prompt, completion)
    }
}

/// Where reference log-probs come from.
#[derive(Clone, Copy, Debug)]
pub enum RefSource<'a> {
    Frozen(&'a FrozenReference),
    Cache(&'a LogitCache),
}

impl RefSource<'_> {
    /// Per-token log-probs for the pair keyed by `id`.
    pub fn token_logps(&self, id: &str, prompt: &[usize], completion: &[usize]) -> Result<Vec<f32>> {
        match self {
            RefSource::Frozen(f) => f.token_logps(prompt, completion),
            RefSource::Cache(c) => c.get(&c.key(id, prompt, completion)).map(<[f32]>::to_vec).ok_or_else(|| {
                Error::CacheInvalid(format!("{}: no entry for {id:?}; rebuild the cache", c.path().display()))
            }),
        }
    }
}

/// Index of the example whose completion is paired with example `i`'s
/// prompt when estimating the reference point.
pub fn mismatch_partner(i: usize, n: usize) -> usize {
    (i + 1) % n
}

fn mismatch_id(a: &PreferenceExample, b: &PreferenceExample) -> String {
    format!("{}|{}", a.id, b.id)
}

fn fits(config: &ModelConfig, prompt: &[usize], completion: &[usize]) -> bool {
    !prompt.is_empty() && !completion.is_empty() && prompt.len() + completion.len() <= config.max_seq + 1
}

/// Examples that fit the model's context.
fn usable<'d>(config: &ModelConfig, data: &'d [PreferenceExample]) -> Vec<&'d PreferenceExample> {
    data.iter().filter(|e| fits(config, &e.prompt, &e.completion)).collect()
}

/// Mismatched pair for usable example `i`, if it fits the context.
fn mismatch<'d>(
    config: &ModelConfig,
    kept: &[&'d PreferenceExample],
    i: usize,
) -> Option<(String, &'d [usize], &'d [usize])> {
    let (a, b) = (kept[i], kept[mismatch_partner(i, kept.len())]);
    fits(config, &a.prompt, &b.completion).then(|| (mismatch_id(a, b), a.prompt.as_slice(), b.completion.as_slice()))
}

/// Runs the frozen reference once over every usable example and its
/// mismatched pair and stores the per-token log-probs at `path`.
pub fn cache_ref_logits(
    reference: &FrozenReference,
    data: &[PreferenceExample],
    path: &Path,
    exec: Execution,
) -> Result<LogitCache> {
    let config = &reference.model.config;
    let kept = usable(config, data);
    if kept.is_empty() {
        return Err(Error::Contract("no usable preference examples".into()));
    }
    let mut cache = LogitCache::create(path, reference.fingerprint())?;
    let mut jobs: Vec<(String, &[usize], &[usize])> = Vec::with_capacity(2 * kept.len());
    for (i, e) in kept.iter().enumerate() {
        jobs.push((e.id.clone(), &e.prompt, &e.completion));
        if let Some(m) = mismatch(config, &kept, i) {
            jobs.push(m);
        }
    }
    let values = exec.map(&jobs, |(_, p, c)| reference.token_logps(p, c));
    for ((id, p, c), v) in jobs.iter().zip(values) {
        let key = cache.key(id, p, c);
        cache.insert(key, v?)?;
    }
    cache.flush()?;
    Ok(cache)
}

/// Mean reward `β·(policy − reference)` over desirable and over undesirable
/// examples.
pub fn kto_margins(
    weights: &TransformerWeights,
    config: &ModelConfig,
    kcfg: &KtoConfig,
    data: &[PreferenceExample],
    reference: RefSource<'_>,
    exec: Execution,
) -> Result<(Option<f64>, Option<f64>)> {
    let kept = usable(config, data);
    let rewards = exec.map(&kept, |e| -> Result<f64> {
        let policy = summed(&completion_logps(weights, config, &e.prompt, &e.completion)?);
        let reference = summed(&reference.token_logps(&e.id, &e.prompt, &e.completion)?);
        Ok(kcfg.beta as f64 * (policy as f64 - reference as f64))
    });
    let mut sums = [(0.0, 0usize); 2];
    for (e, r) in kept.iter().zip(rewards) {
        let s = &mut sums[e.desirable as usize];
        s.0 += r?;
        s.1 += 1;
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok((mean(sums[1]), mean(sums[0])))
}

/// Minibatch KTO against a frozen reference or a cache of its outputs.
///
/// Each step estimates the reference point `z0 = max(0, mean β·(policy −
/// reference))` over mismatched prompt/completion pairs from the batch,
/// with the current policy and no gradient, then takes one optimizer step
/// on the mean KTO loss.
pub fn kto_train(
    weights: &TransformerWeights,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    kcfg: &KtoConfig,
    data: &[PreferenceExample],
    reference: RefSource<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    kcfg.validate()?;
    weights.validate(model_cfg)?;
    let kept = usable(model_cfg, data);
    let skipped = data.len() - kept.len();
    let n_desirable = kept.iter().filter(|e| e.desirable).count();
    if n_desirable == 0 || n_desirable == kept.len() {
        log::warn!("kto: every example has the same label; the reference point estimate degenerates");
    }
    let mut sampler = BatchSampler::new(kept.len(), derive_seed(cfg.seed, "kto/batches"))?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut w = weights.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    let beta = kcfg.beta as f64;

    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let refs = cfg.execution.map(&batch, |&i| -> Result<f32> {
            let e = kept[i];
            Ok(summed(&reference.token_logps(&e.id, &e.prompt, &e.completion)?))
        });
        let refs: Vec<f32> = refs.into_iter().collect::<Result<_>>()?;

        let kl_n = match kcfg.reference_kl_batch {
            0 => batch.len(),
            k => k.min(batch.len()),
        };
        let pairs: Vec<_> = batch[..kl_n].iter().filter_map(|&i| mismatch(model_cfg, &kept, i)).collect();
        let kl_rewards = cfg.execution.map(&pairs, |(id, p, c)| -> Result<f64> {
            let policy = summed(&completion_logps(&w, model_cfg, p, c)?);
            let reference = summed(&reference.token_logps(id, p, c)?);
            Ok(beta * (policy as f64 - reference as f64))
        });
        let kl_rewards: Vec<f64> = kl_rewards.into_iter().collect::<Result<_>>()?;
        let kl = if kl_rewards.is_empty() {
            0.0
        } else {
            kl_rewards.iter().sum::<f64>() / kl_rewards.len() as f64
        };
        let z0 = kl.max(0.0) as f32;

        let position: BTreeMap<usize, usize> = batch.iter().enumerate().map(|(j, &i)| (i, j)).collect();
        let bg = batch_gradients(&w, cfg.execution, &batch, step, |i, g, p| {
            let e = kept[i];
            let policy = build_completion_logp(g, p, model_cfg, &e.prompt, &e.completion)?;
            let loss = build_kto_loss(g, policy, &[refs[position[&i]]], &[e.desirable], z0, kcfg)?;
            Ok((loss, Some(policy)))
        })?;

        let mut margins = [(0.0f64, 0usize); 2];
        for ((&i, &r), policy) in batch.iter().zip(&refs).zip(&bg.aux) {
            let policy = policy.expect("policy log-prob recorded");
            let m = &mut margins[kept[i].desirable as usize];
            m.0 += beta * (policy as f64 - r as f64);
            m.1 += 1;
        }
        let grad_norm = apply_update(&mut w, &mut opt, cfg, bg.grads)?;

        let mut extra = BTreeMap::new();
        extra.insert("z0".to_string(), z0 as f64);
        extra.insert("kl".to_string(), kl);
        if margins[1].1 > 0 {
            extra.insert("margin_desirable".to_string(), margins[1].0 / margins[1].1 as f64);
        }
        if margins[0].1 > 0 {
            extra.insert("margin_undesirable".to_string(), margins[0].0 / margins[0].1 as f64);
        }
        log.push(StepRecord {
            phase: "kto".into(),
            step,
            loss: bg.loss,
            grad_norm,
            lr: cfg.learning_rate,
            mask: None,
            extra,
        });
    }
    Ok(TrainOutcome {
        weights: w,
        log,
        skipped,
    })
}
