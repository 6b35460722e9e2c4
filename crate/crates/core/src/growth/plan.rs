use serde::{Deserialize, Serialize};

use super::schedule::ScheduleConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthStrategy {
    /// Copy the preceding block and zero its output projections.
    Llamapro,
    /// Apply `stages` one after another.
    Staged,
    /// Splice two overlapping copies of the layer stack.
    Depthup,
    /// Draw new blocks from the base model's per-group statistics.
    NormalInit,
    #[default]
    None,
}

impl DepthStrategy {
    pub fn name(self) -> &'static str {
        match self {
            DepthStrategy::Llamapro => "llamapro",
            DepthStrategy::Staged => "staged",
            DepthStrategy::Depthup => "depthup",
            DepthStrategy::NormalInit => "normal_init",
            DepthStrategy::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthTargets {
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub attn_heads: usize,
}

fn yes() -> bool {
    true
}

fn default_probes() -> usize {
    10
}

fn default_probe_len() -> usize {
    16
}

/// What to grow and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthPlan {
    #[serde(default)]
    pub depth_strategy: DepthStrategy,
    #[serde(default)]
    pub new_layers: usize,
    /// Number of original blocks preceding each new block. Defaults to one
    /// new block after every `⌊layers / new_layers⌋` originals.
    #[serde(default)]
    pub insertion_positions: Option<Vec<usize>>,
    #[serde(default)]
    pub width_targets: Option<WidthTargets>,
    #[serde(default = "yes")]
    pub preserve_head_dim: bool,
    #[serde(default = "yes")]
    pub preserve_kv_heads: bool,
    /// Sub-plans for the staged strategy.
    #[serde(default)]
    pub stages: Vec<GrowthPlan>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Random sequences used to measure logit divergence after growth.
    #[serde(default = "default_probes")]
    pub verify_probes: usize,
    #[serde(default = "default_probe_len")]
    pub verify_seq_len: usize,
}

impl Default for GrowthPlan {
    fn default() -> Self {
        GrowthPlan {
            depth_strategy: DepthStrategy::None,
            new_layers: 0,
            insertion_positions: None,
            width_targets: None,
            preserve_head_dim: true,
            preserve_kv_heads: true,
            stages: Vec::new(),
            schedule: ScheduleConfig::default(),
            verify_probes: default_probes(),
            verify_seq_len: default_probe_len(),
        }
    }
}

/// One new block after every `⌊layers / new_layers⌋` originals.
pub fn default_positions(layers: usize, new_layers: usize) -> Result<Vec<usize>> {
    if new_layers == 0 || new_layers > layers {
        return Err(Error::Plan(format!(
            "cannot interleave {new_layers} new blocks among {layers}"
        )));
    }
    let step = layers / new_layers;
    Ok((1..=new_layers).map(|k| k * step).collect())
}

pub(crate) fn check_positions(layers: usize, new_layers: usize, positions: &[usize]) -> Result<()> {
    if new_layers == 0 {
        return Err(Error::Plan("new_layers must be at least 1".into()));
    }
    if positions.len() != new_layers {
        return Err(Error::Plan(format!(
            "{} insertion positions for {new_layers} new layers",
            positions.len()
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p > layers) {
        return Err(Error::Plan(format!(
            "insertion position {p} outside [0, {layers}]"
        )));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Plan(format!(
            "insertion positions {positions:?} are not strictly increasing"
        )));
    }
    Ok(())
}

impl GrowthPlan {
    /// True when the grown model must reproduce the base model's logits:
    /// every depth step is LlamaPro (or absent) and width growth is masked.
    pub fn preserves_function(&self) -> bool {
        match self.depth_strategy {
            DepthStrategy::Llamapro | DepthStrategy::None => true,
            DepthStrategy::Staged => self.stages.iter().all(GrowthPlan::preserves_function),
            DepthStrategy::Depthup | DepthStrategy::NormalInit => false,
        }
    }

    /// Depth-only LlamaPro plan with default positions.
    pub fn llamapro(new_layers: usize) -> Self {
        GrowthPlan {
            depth_strategy: DepthStrategy::Llamapro,
            new_layers,
            ..Default::default()
        }
    }

    pub fn width(targets: WidthTargets) -> Self {
        GrowthPlan {
            width_targets: Some(targets),
            ..Default::default()
        }
    }

    /// Insertion positions for a depth plan on a `layers`-deep model.
    pub fn positions(&self, layers: usize) -> Result<Vec<usize>> {
        let p = match &self.insertion_positions {
            Some(p) => p.clone(),
            None => default_positions(layers, self.new_layers)?,
        };
        check_positions(layers, self.new_layers, &p)?;
        Ok(p)
    }

    pub(crate) fn depth_config(&self, config: &ModelConfig) -> Result<ModelConfig> {
        let l = config.layers;
        match self.depth_strategy {
            DepthStrategy::None => {
                if self.new_layers != 0 {
                    return Err(Error::Plan(format!(
                        "new_layers {} given without a depth strategy",
                        self.new_layers
                    )));
                }
                Ok(config.clone())
            }
            DepthStrategy::Llamapro | DepthStrategy::NormalInit => {
                self.positions(l)?;
                Ok(ModelConfig {
                    layers: l + self.new_layers,
                    ..config.clone()
                })
            }
            DepthStrategy::Depthup => {
                depthup_overlap(l, self.new_layers)?;
                Ok(ModelConfig {
                    layers: l + self.new_layers,
                    ..config.clone()
                })
            }
            DepthStrategy::Staged => {
                if self.stages.is_empty() {
                    return Err(Error::Plan("staged expansion needs at least one stage".into()));
                }
                let mut c = config.clone();
                let mut widths = 0;
                for (i, s) in self.stages.iter().enumerate() {
                    if s.depth_strategy == DepthStrategy::Staged {
                        return Err(Error::Plan(format!("stage {i}: stages cannot nest")));
                    }
                    widths += s.width_targets.is_some() as usize;
                    if widths > 1 {
                        return Err(Error::Plan(format!(
                            "stage {i}: at most one stage may expand width"
                        )));
                    }
                    c = s
                        .target_config(&c)
                        .map_err(|e| Error::Plan(format!("stage {i}: {e}")))?;
                }
                Ok(c)
            }
        }
    }

    pub(crate) fn width_config(&self, config: &ModelConfig) -> Result<ModelConfig> {
        let Some(t) = self.width_targets else {
            return Ok(config.clone());
        };
        check_width(config, &t, self.preserve_head_dim, self.preserve_kv_heads)?;
        Ok(ModelConfig {
            model_dim: t.model_dim,
            ffn_dim: t.ffn_dim,
            attn_heads: t.attn_heads,
            ..config.clone()
        })
    }

    /// The geometry this plan produces from `config`, without touching any
    /// weights.
    pub fn target_config(&self, config: &ModelConfig) -> Result<ModelConfig> {
        config.validate()?;
        let c = self.depth_config(config)?;
        self.width_config(&c)
    }
}

pub(crate) fn check_width(
    config: &ModelConfig,
    t: &WidthTargets,
    preserve_head_dim: bool,
    preserve_kv_heads: bool,
) -> Result<()> {
    if !preserve_head_dim {
        return Err(Error::Plan("width growth must preserve head_dim".into()));
    }
    if !preserve_kv_heads {
        return Err(Error::Plan("width growth must preserve kv_heads".into()));
    }
    if t.model_dim < config.model_dim || t.ffn_dim < config.ffn_dim || t.attn_heads < config.attn_heads
    {
        return Err(Error::Plan(format!(
            "width targets (d {}, ffn {}, heads {}) shrink the model (d {}, ffn {}, heads {})",
            t.model_dim, t.ffn_dim, t.attn_heads, config.model_dim, config.ffn_dim, config.attn_heads
        )));
    }
    if t.model_dim != t.attn_heads * config.head_dim {
        return Err(Error::Plan(format!(
            "model_dim {} != attn_heads {} x head_dim {}: head_dim would change",
            t.model_dim, t.attn_heads, config.head_dim
        )));
    }
    if (t.attn_heads - config.attn_heads) % config.kv_heads != 0 {
        return Err(Error::Plan(format!(
            "{} new heads cannot be spread evenly over {} kv groups",
            t.attn_heads - config.attn_heads,
            config.kv_heads
        )));
    }
    Ok(())
}

/// Overlap `m` such that `[0, L−m) ++ [m, L)` has `L + new_layers` blocks.
pub fn depthup_overlap(layers: usize, new_layers: usize) -> Result<usize> {
    if new_layers == 0 {
        return Ok(layers);
    }
    if new_layers > layers || (layers - new_layers) % 2 != 0 {
        return Err(Error::Plan(format!(
            "depth-up cannot grow {layers} layers by {new_layers}: needs new_layers <= layers and an even remainder"
        )));
    }
    Ok((layers - new_layers) / 2)
}
