//! Model surgery: depth growth (LlamaPro, depth-up, normal-statistics
//! init, staged), masked width growth, and a logit-divergence verifier.

mod depth;
mod plan;
mod schedule;
mod width;

pub use depth::{expand_depth_llamapro, expand_depthup, expand_normal_init, group_statistics};
pub use plan::{default_positions, depthup_overlap, DepthStrategy, GrowthPlan, WidthTargets};
pub use schedule::{mask_value, MaskSchedule, RampShape, ScheduleConfig, UnmaskMode};
pub use width::{expand_width_msg, head_layout};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LanguageModel, MaskedModel, Model, ModelConfig, TransformerWeights};
use crate::par::Execution;
use crate::seed::derive_seed;

/// Summary of one growth run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub strategy: String,
    pub base_config: ModelConfig,
    pub grown_config: ModelConfig,
    pub base_param_count: u64,
    pub grown_param_count: u64,
    /// Worst absolute logit difference between base and grown model (new
    /// channels masked) over the probe sequences.
    pub max_logit_divergence: f32,
    pub elapsed_secs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<GrowthReport>,
}

/// A grown model together with its unmask schedule, if width grew.
#[derive(Clone, Debug)]
pub struct Grown {
    pub weights: TransformerWeights,
    pub config: ModelConfig,
    pub schedule: Option<MaskSchedule>,
    pub report: GrowthReport,
}

impl Grown {
    pub fn model(&self) -> Model {
        Model {
            config: self.config.clone(),
            weights: self.weights.clone(),
        }
    }
}

/// Largest absolute logit difference between `base` and `grown` over
/// `n_probes` random sequences of `seq_len` tokens.
pub fn verify_function_preservation<A: LanguageModel, B: LanguageModel>(
    base: &A,
    grown: &B,
    n_probes: usize,
    seq_len: usize,
    seed: u64,
    exec: Execution,
) -> Result<f32> {
    let vocab = base.vocab_size();
    if grown.vocab_size() != vocab {
        return Err(Error::Contract(format!(
            "vocabularies differ: base {vocab}, grown {}",
            grown.vocab_size()
        )));
    }
    if seq_len == 0 || seq_len > base.max_seq().min(grown.max_seq()) {
        return Err(Error::Contract(format!(
            "probe length {seq_len} outside [1, {}]",
            base.max_seq().min(grown.max_seq())
        )));
    }
    let per_probe = exec.map_range(n_probes, |i| -> Result<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("probe{i}")));
        let tokens: Vec<usize> = (0..seq_len).map(|_| rng.random_range(0..vocab)).collect();
        let a = base.logits(&tokens)?;
        let b = grown.logits(&tokens)?;
        a.max_abs_diff(&b)
    });
    per_probe
        .into_iter()
        .try_fold(0f32, |m, d| Ok(m.max(d?)))
}

fn report(
    strategy: &str,
    base: &ModelConfig,
    grown: &ModelConfig,
    divergence: f32,
    started: Instant,
) -> GrowthReport {
    GrowthReport {
        strategy: strategy.to_string(),
        base_config: base.clone(),
        grown_config: grown.clone(),
        base_param_count: base.count_params(),
        grown_param_count: grown.count_params(),
        max_logit_divergence: divergence,
        elapsed_secs: started.elapsed().as_secs_f64(),
        stages: Vec::new(),
    }
}

/// Applies `stages` in order; each is a full plan run against the running
/// model. At most one stage may grow width.
pub fn expand_staged(
    weights: &TransformerWeights,
    config: &ModelConfig,
    stages: &[GrowthPlan],
    seed: u64,
) -> Result<Grown> {
    expand_staged_masked(weights, config, None, stages, seed)
}

fn expand_staged_masked(
    weights: &TransformerWeights,
    config: &ModelConfig,
    incoming: Option<MaskSchedule>,
    stages: &[GrowthPlan],
    seed: u64,
) -> Result<Grown> {
    let started = Instant::now();
    let staged = GrowthPlan {
        depth_strategy: DepthStrategy::Staged,
        stages: stages.to_vec(),
        ..Default::default()
    };
    staged.target_config(config)?;
    let mut w = weights.clone();
    let mut c = config.clone();
    let mut schedule = incoming;
    let mut reports = Vec::with_capacity(stages.len());
    let mut divergence = 0f32;
    for (i, stage) in stages.iter().enumerate() {
        let g = grow_inner(&w, &c, schedule.clone(), stage, derive_seed(seed, &format!("stage{i}")))
            .map_err(|e| Error::Plan(format!("stage {i}: {e}")))?;
        divergence = divergence.max(g.report.max_logit_divergence);
        w = g.weights;
        c = g.config;
        schedule = g.schedule;
        reports.push(g.report);
    }
    let mut r = report("staged", config, &c, divergence, started);
    r.stages = reports;
    Ok(Grown {
        weights: w,
        config: c,
        schedule,
        report: r,
    })
}

/// Depth growth by the plan's strategy, then masked width growth, then a
/// divergence check against the input model with every new channel masked.
pub fn grow_pipeline(
    weights: &TransformerWeights,
    config: &ModelConfig,
    plan: &GrowthPlan,
    seed: u64,
) -> Result<Grown> {
    grow_inner(weights, config, None, plan, seed)
}

fn grow_inner(
    weights: &TransformerWeights,
    config: &ModelConfig,
    incoming: Option<MaskSchedule>,
    plan: &GrowthPlan,
    seed: u64,
) -> Result<Grown> {
    let started = Instant::now();
    plan.target_config(config)?;
    weights.validate(config)?;
    if incoming.is_some() && plan.width_targets.is_some() {
        return Err(Error::Plan("model has already been widened once".into()));
    }
    let positions = plan.insertion_positions.as_deref();
    let (mut w, mut c, mut schedule, stages) = match plan.depth_strategy {
        DepthStrategy::None => (weights.clone(), config.clone(), incoming.clone(), Vec::new()),
        DepthStrategy::Llamapro => {
            let (w, c) = expand_depth_llamapro(weights, config, plan.new_layers, positions)?;
            (w, c, incoming.clone(), Vec::new())
        }
        DepthStrategy::NormalInit => {
            let s = derive_seed(seed, "normal_init");
            let (w, c) = expand_normal_init(weights, config, plan.new_layers, positions, s)?;
            (w, c, incoming.clone(), Vec::new())
        }
        DepthStrategy::Depthup => {
            let (w, c) = expand_depthup(weights, config, plan.new_layers)?;
            (w, c, incoming.clone(), Vec::new())
        }
        DepthStrategy::Staged => {
            let g = expand_staged_masked(weights, config, incoming.clone(), &plan.stages, seed)?;
            (g.weights, g.config, g.schedule, g.report.stages)
        }
    };
    if let Some(s) = schedule.as_mut() {
        s.layers = c.layers;
    }
    if let Some(targets) = plan.width_targets {
        if schedule.is_some() {
            return Err(Error::Plan("model has already been widened once".into()));
        }
        let (w2, c2, s) =
            expand_width_msg(&w, &c, targets, plan.schedule, derive_seed(seed, "width"))?;
        w = w2;
        c = c2;
        schedule = Some(s);
    }

    let base = Model {
        config: config.clone(),
        weights: weights.clone(),
    };
    let grown = Model {
        config: c.clone(),
        weights: w,
    };
    let base_masks = incoming.as_ref().map(|s| s.masks_at(0)).transpose()?;
    let grown_masks = schedule.as_ref().map(|s| s.masks_at(0)).transpose()?;
    let divergence = if plan.verify_probes == 0 {
        0.0
    } else {
        let seq_len = plan.verify_seq_len.min(config.max_seq).min(c.max_seq);
        verify_function_preservation(
            &MaskedModel {
                model: &base,
                masks: base_masks.as_ref(),
            },
            &MaskedModel {
                model: &grown,
                masks: grown_masks.as_ref(),
            },
            plan.verify_probes,
            seq_len,
            derive_seed(seed, "verify"),
            Execution::default(),
        )?
    };
    let mut r = report(plan.depth_strategy.name(), config, &c, divergence, started);
    if plan.width_targets.is_some() {
        r.strategy = if plan.depth_strategy == DepthStrategy::None {
            "msg".into()
        } else {
            format!("{}+msg", r.strategy)
        };
    }
    r.stages = stages;
    Ok(Grown {
        weights: grown.weights,
        config: c,
        schedule,
        report: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn model_against_itself_is_zero() {
        let c = ModelConfig::toy(2, 16, 32, 4, 2, 30);
        let m = Model::init(c, 1).unwrap();
        let d = verify_function_preservation(&m, &m, 4, 8, 0, Execution::Serial).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let a = Model::init(ModelConfig::toy(1, 8, 16, 2, 1, 30), 1).unwrap();
        let b = Model::init(ModelConfig::toy(1, 8, 16, 2, 1, 31), 1).unwrap();
        assert!(matches!(
            verify_function_preservation(&a, &b, 2, 4, 0, Execution::Serial),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn width_only_pipeline_equals_direct_call() {
        let c = ModelConfig::toy(2, 16, 32, 4, 2, 30);
        let w = init_model(&c, 2).unwrap();
        let t = WidthTargets {
            model_dim: 24,
            ffn_dim: 48,
            attn_heads: 6,
        };
        let g = grow_pipeline(&w, &c, &GrowthPlan::width(t), 9).unwrap();
        let (dw, dc, ds) =
            expand_width_msg(&w, &c, t, ScheduleConfig::default(), derive_seed(9, "width")).unwrap();
        assert_eq!(g.weights, dw);
        assert_eq!(g.config, dc);
        assert_eq!(g.schedule.unwrap(), ds);
        assert_eq!(g.report.strategy, "msg");
    }

    #[test]
    fn report_serialises() {
        let c = ModelConfig::toy(2, 16, 32, 4, 2, 30);
        let w = init_model(&c, 2).unwrap();
        let g = grow_pipeline(&w, &c, &GrowthPlan::llamapro(1), 0).unwrap();
        let json = serde_json::to_string(&g.report).unwrap();
        let back: GrowthReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g.report);
        assert!(g.report.max_logit_divergence >= 0.0);
    }
}
