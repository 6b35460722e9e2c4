//! Training loops: continual pretraining with mask stepping, supervised
//! fine-tuning with noisy embeddings, and KTO preference optimization.

mod cache;
mod kto;
mod loops;
mod neft;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{cache_key, model_fingerprint, LogitCache, CACHE_MAGIC, CACHE_VERSION};
pub use kto::{
    build_kto_loss, cache_ref_logits, completion_logps, kto_loss, kto_margins, kto_train, load_preferences,
    mismatch_partner, FrozenReference, KtoConfig, PreferenceExample, RefSource,
};
pub use loops::{build_response_loss, load_instructions, pretrain, response_loss, sft, SftExample};
pub use neft::{neft_bound, neft_noise, neftune_noise};
pub use optim::{clip_global_norm, global_norm, Optimizer, OptimizerConfig, OptimizerKind};

use crate::error::{Error, Result};
use crate::model::{bind, ParamVars, TransformerWeights};
use crate::par::Execution;
use crate::seed::derive_seed;
use crate::tensor::{Graph, Var};

fn default_batch() -> usize {
    128
}

fn default_lr() -> f32 {
    1e-6
}

fn default_steps() -> usize {
    100
}

fn default_clip() -> Option<f32> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub neft_alpha: f32,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f32>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            learning_rate: default_lr(),
            steps: default_steps(),
            neft_alpha: 0.0,
            optimizer: OptimizerConfig::default(),
            grad_clip: default_clip(),
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    /// Rejects settings no loop can run with. A learning rate of exactly zero
    /// is accepted and freezes the weights.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} out of range", self.learning_rate)));
        }
        if !(self.neft_alpha >= 0.0 && self.neft_alpha.is_finite()) {
            return Err(Error::Config(format!("neft_alpha {} must be >= 0", self.neft_alpha)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be > 0")));
            }
        }
        self.optimizer.validate()
    }
}

/// One line of the per-step metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<f32>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, f64>,
}

/// Final weights and the metrics of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: TransformerWeights,
    pub log: Vec<StepRecord>,
    /// Records dropped before training (empty response, too long, ...).
    pub skipped: usize,
}

impl TrainOutcome {
    pub fn first_loss(&self) -> Option<f64> {
        self.log.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }
}

/// Writes `records` as JSON lines.
pub fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Draws minibatches of dataset indices, reshuffling once per epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("cannot sample batches from an empty dataset".into()));
        }
        let mut s = BatchSampler {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("epoch/{}", self.epoch)));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean loss and mean gradient over a minibatch.
pub(crate) struct BatchGrad {
    pub loss: f64,
    pub grads: Vec<Vec<f32>>,
    pub aux: Vec<Option<f32>>,
}

/// Builds one graph per batch item with `f`, backpropagates each
/// independently (in parallel when `exec` allows) and sums the gradients in
/// item order, so the result does not depend on scheduling.
pub(crate) fn batch_gradients<F>(
    weights: &TransformerWeights,
    exec: Execution,
    items: &[usize],
    step: usize,
    f: F,
) -> Result<BatchGrad>
where
    F: Fn(usize, &mut Graph, &ParamVars) -> Result<(Var, Option<Var>)> + Sync,
{
    let shapes: Vec<usize> = weights.tensors().iter().map(|t| t.numel()).collect();
    let per_item = exec.map(items, |&item| -> Result<(f32, Vec<Vec<f32>>, Option<f32>)> {
        let mut g = Graph::new();
        let p = bind(&mut g, weights, true);
        let (loss, aux) = f(item, &mut g, &p)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, batch: item });
        }
        let aux = aux.map(|a| g.value(a).item()).transpose()?;
        g.backward(loss)?;
        let grads = p
            .all()
            .iter()
            .zip(&shapes)
            .map(|(&v, &n)| g.grad(v).map_or_else(|| vec![0.0; n], <[f32]>::to_vec))
            .collect();
        Ok((value, grads, aux))
    });

    let scale = 1.0 / items.len() as f32;
    let mut sum: Vec<Vec<f32>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
    let mut loss = 0.0f64;
    let mut aux = Vec::with_capacity(items.len());
    for (r, &item) in per_item.into_iter().zip(items) {
        let (l, grads, a) = r?;
        loss += l as f64;
        aux.push(a);
        for (s, g) in sum.iter_mut().zip(grads) {
            for (si, gi) in s.iter_mut().zip(g) {
                *si += gi;
            }
        }
        if sum.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { step, batch: item });
        }
    }
    for s in sum.iter_mut() {
        for x in s.iter_mut() {
            *x *= scale;
        }
    }
    Ok(BatchGrad {
        loss: loss / items.len() as f64,
        grads: sum,
        aux,
    })
}

/// Clips and applies `grads`; returns the pre-clip norm.
pub(crate) fn apply_update(
    weights: &mut TransformerWeights,
    opt: &mut Optimizer,
    cfg: &TrainConfig,
    mut grads: Vec<Vec<f32>>,
) -> Result<f64> {
    let norm = match cfg.grad_clip {
        Some(c) => clip_global_norm(&mut grads, c),
        None => global_norm(&grads),
    };
    opt.step(weights.tensors_mut(), &grads, cfg.learning_rate)?;
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, 1).unwrap();
        let mut a = s.next_batch(5);
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        let b = s.next_batch(7);
        assert_eq!(b.len(), 7);
        let mut again = BatchSampler::new(5, 1).unwrap();
        again.next_batch(5);
        assert_eq!(again.next_batch(7), b);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.learning_rate, 1e-6);
        assert_eq!(c.neft_alpha, 0.0);
        assert_eq!(c.grad_clip, Some(1.0));
        assert_eq!(c.optimizer.kind, OptimizerKind::Adamw);
        assert!(c.validate().is_ok());
        let bad = TrainConfig {
            neft_alpha: -1.0,
            ..c.clone()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 1}"#).is_err());
    }

    #[test]
    fn metrics_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut extra = BTreeMap::new();
        extra.insert("z0".to_string(), 0.25);
        let r = StepRecord {
            phase: "kto".into(),
            step: 3,
            loss: 0.5,
            grad_norm: 1.0,
            lr: 0.1,
            mask: None,
            extra,
        };
        write_metrics(&p, &[r.clone(), r.clone()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: StepRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back, r);
        assert!(lines[0].contains("\"z0\":0.25"));
    }
}
