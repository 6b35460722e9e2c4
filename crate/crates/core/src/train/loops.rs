use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use super::{apply_update, batch_gradients, neft_noise, BatchSampler, Optimizer, StepRecord, TrainConfig, TrainOutcome};
use crate::data::tokenizer::{BOS, EOS};
use crate::error::{Error, Result};
use crate::growth::MaskSchedule;
use crate::model::{bind, build, build_loss, ForwardOptions, ModelConfig, ParamVars, TransformerWeights};
use crate::seed::derive_seed;
use crate::tensor::{Graph, Tensor, Var};

/// Continual pretraining on `stream`, stepping `schedule` once per update.
///
/// Sequences shorter than two tokens are skipped; longer than
/// `max_seq + 1` are truncated.
pub fn pretrain(
    weights: &TransformerWeights,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    stream: &[Vec<usize>],
    schedule: Option<&MaskSchedule>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate(model_cfg)?;
    let limit = model_cfg.max_seq + 1;
    let seqs: Vec<&[usize]> = stream
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| &s[..s.len().min(limit)])
        .collect();
    let skipped = stream.len() - seqs.len();
    let mut sampler = BatchSampler::new(seqs.len(), derive_seed(cfg.seed, "pretrain/batches"))?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut w = weights.clone();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (masks, mask) = match schedule {
            Some(s) => {
                let at = (step as u64).min(s.total_steps());
                (Some(s.masks_at(at)?), Some(s.value(at)?))
            }
            None => (None, None),
        };
        let batch = sampler.next_batch(cfg.batch_size);
        let opts = ForwardOptions {
            masks: masks.as_ref(),
            ..Default::default()
        };
        let bg = batch_gradients(&w, cfg.execution, &batch, step, |i, g, p| {
            Ok((build_loss(g, p, model_cfg, seqs[i], opts)?, None))
        })?;
        let grad_norm = apply_update(&mut w, &mut opt, cfg, bg.grads)?;
        log::debug!("pretrain step {step}: loss {:.5}", bg.loss);
        log.push(StepRecord {
            phase: "pretrain".into(),
            step,
            loss: bg.loss,
            grad_norm,
            lr: cfg.learning_rate,
            mask,
            extra: Default::default(),
        });
    }
    Ok(TrainOutcome {
        weights: w,
        log,
        skipped,
    })
}

/// An instruction-tuning record, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SftExample {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
}

impl SftExample {
    /// `BOS prompt` and `response EOS`; an empty response stays empty.
    pub fn from_text(prompt: &str, response: &str) -> Self {
        let mut p = vec![BOS];
        p.extend(prompt.bytes().map(usize::from));
        let mut r: Vec<usize> = response.bytes().map(usize::from).collect();
        if !r.is_empty() {
            r.push(EOS);
        }
        SftExample { prompt: p, response: r }
    }

    pub fn sequence(&self) -> Vec<usize> {
        [self.prompt.as_slice(), &self.response].concat()
    }

    /// 1 for targets that are response tokens, 0 for prompt tokens.
    pub fn loss_mask(&self) -> Vec<f32> {
        let n = self.prompt.len() + self.response.len();
        (1..n).map(|t| if t >= self.prompt.len() { 1.0 } else { 0.0 }).collect()
    }

    fn trainable(&self, config: &ModelConfig) -> bool {
        !self.prompt.is_empty()
            && !self.response.is_empty()
            && self.prompt.len() + self.response.len() <= config.max_seq + 1
    }
}

#[derive(Deserialize)]
struct InstructionRecord {
    prompt: String,
    response: String,
}

/// Reads `{prompt, response}` JSON lines.
pub fn load_instructions(path: &Path) -> Result<Vec<SftExample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: InstructionRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(SftExample::from_text(&r.prompt, &r.response));
    }
    Ok(out)
}

/// Records the response-only mean cross-entropy; returns it with the logits
/// handle.
pub fn build_response_loss(
    g: &mut Graph,
    p: &ParamVars,
    config: &ModelConfig,
    ex: &SftExample,
    opts: ForwardOptions<'_>,
) -> Result<(Var, Var)> {
    if ex.response.is_empty() || ex.prompt.is_empty() {
        return Err(Error::Contract("sft example needs a prompt and a response".into()));
    }
    let seq = ex.sequence();
    let n = seq.len();
    let (logits, _) = build(g, p, config, &seq[..n - 1], opts)?;
    let lp = g.log_softmax_gather(logits, &seq[1..])?;
    let mask = ex.loss_mask();
    let count = mask.iter().filter(|&&m| m > 0.0).count();
    let m = g.constant(Tensor::from_parts(vec![n - 1], mask));
    let picked = g.mul(lp, m)?;
    let total = g.sum(picked);
    Ok((g.scale(total, -1.0 / count as f64), logits))
}

/// Supervised fine-tuning on response tokens, with NEFTune noise added to
/// the embeddings when `cfg.neft_alpha > 0`.
pub fn sft(
    weights: &TransformerWeights,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &[SftExample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate(model_cfg)?;
    let kept: Vec<&SftExample> = data.iter().filter(|e| e.trainable(model_cfg)).collect();
    let skipped = data.len() - kept.len();
    if skipped > 0 {
        log::warn!("sft: skipped {skipped} records with an empty or over-long response");
    }
    let mut sampler = BatchSampler::new(kept.len(), derive_seed(cfg.seed, "sft/batches"))?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut w = weights.clone();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let bg = batch_gradients(&w, cfg.execution, &batch, step, |i, g, p| {
            let ex = kept[i];
            let noise = if cfg.neft_alpha > 0.0 {
                let len = ex.prompt.len() + ex.response.len() - 1;
                let seed = derive_seed(cfg.seed, &format!("neft/{step}/{i}"));
                Some(neft_noise(len, model_cfg.model_dim, cfg.neft_alpha, seed)?)
            } else {
                None
            };
            let opts = ForwardOptions {
                embed_noise: noise.as_ref(),
                ..Default::default()
            };
            Ok((build_response_loss(g, p, model_cfg, ex, opts)?.0, None))
        })?;
        let grad_norm = apply_update(&mut w, &mut opt, cfg, bg.grads)?;
        log.push(StepRecord {
            phase: "sft".into(),
            step,
            loss: bg.loss,
            grad_norm,
            lr: cfg.learning_rate,
            mask: None,
            extra: Default::default(),
        });
    }
    Ok(TrainOutcome {
        weights: w,
        log,
        skipped,
    })
}

/// Mean response-only loss over `data` without noise, skipping records
/// `sft` would skip.
pub fn response_loss(weights: &TransformerWeights, model_cfg: &ModelConfig, data: &[SftExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ex in data.iter().filter(|e| e.trainable(model_cfg)) {
        let mut g = Graph::new();
        let p = bind(&mut g, weights, false);
        let (loss, _) = build_response_loss(&mut g, &p, model_cfg, ex, ForwardOptions::default())?;
        total += g.value(loss).item()? as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("no usable sft records".into()));
    }
    Ok(total / n as f64)
}
