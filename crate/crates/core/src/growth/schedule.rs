use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Masks, WidthLayout};

/// Ramp shape of a mask going from 0 to 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    #[default]
    Linear,
    /// `(1 − cos πu) / 2`.
    Cosine,
}

impl RampShape {
    /// Maps progress `u ∈ [0, 1]` to a mask value in `[0, 1]`.
    pub fn apply(self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            RampShape::Linear => u,
            RampShape::Cosine => (1.0 - (std::f64::consts::PI * u).cos()) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskMode {
    /// Every layer follows the same ramp.
    #[default]
    Synchronized,
    /// Each layer ramps over half the budget, shallow layers first; the last
    /// layer finishes at `total_steps`.
    Staggered,
}

fn default_total_steps() -> u64 {
    1000
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default)]
    pub shape: RampShape,
    #[serde(default)]
    pub mode: UnmaskMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_steps: default_total_steps(),
            shape: RampShape::default(),
            mode: UnmaskMode::default(),
        }
    }
}

/// Unmasking schedule for the channels added by width growth.
///
/// Original channels are never masked; new ones ramp from 0 at step 0 to 1
/// at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub config: ScheduleConfig,
    pub layout: WidthLayout,
    pub layers: usize,
}

impl MaskSchedule {
    pub fn new(config: ScheduleConfig, layout: WidthLayout, layers: usize) -> Result<Self> {
        if config.total_steps == 0 {
            return Err(Error::Plan("mask schedule needs total_steps >= 1".into()));
        }
        Ok(MaskSchedule {
            config,
            layout,
            layers,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps
    }

    fn check_step(&self, step: u64) -> Result<()> {
        if step > self.config.total_steps {
            return Err(Error::Contract(format!(
                "mask step {step} outside [0, {}]",
                self.config.total_steps
            )));
        }
        Ok(())
    }

    /// The global ramp value at `step`.
    pub fn value(&self, step: u64) -> Result<f32> {
        self.check_step(step)?;
        let u = step as f64 / self.config.total_steps as f64;
        Ok(self.config.shape.apply(u) as f32)
    }

    /// Mask value of the new channels in block `layer` at `step`.
    pub fn layer_value(&self, layer: usize, step: u64) -> Result<f32> {
        self.check_step(step)?;
        if layer >= self.layers {
            return Err(Error::Index {
                what: "mask layer",
                index: layer,
                bound: self.layers,
            });
        }
        match self.config.mode {
            UnmaskMode::Synchronized => self.value(step),
            UnmaskMode::Staggered => {
                let total = self.config.total_steps as f64;
                let window = (total / 2.0).max(1.0);
                let start = if self.layers > 1 {
                    layer as f64 * (total - window) / (self.layers - 1) as f64
                } else {
                    0.0
                };
                let u = (step as f64 - start) / window;
                Ok(self.config.shape.apply(u) as f32)
            }
        }
    }

    /// All mask values for a forward pass at `step`. The embedding follows
    /// the first block and the final norm the last.
    pub fn masks_at(&self, step: u64) -> Result<Masks> {
        let layers = (0..self.layers)
            .map(|l| self.layer_value(l, step))
            .collect::<Result<Vec<_>>>()?;
        let embed = layers.first().copied().unwrap_or(self.value(step)?);
        let final_norm = layers.last().copied().unwrap_or(embed);
        Ok(Masks {
            layout: self.layout.clone(),
            embed,
            layers,
            final_norm,
        })
    }
}

/// Free-function form of [`MaskSchedule::value`].
pub fn mask_value(schedule: &MaskSchedule, step: u64) -> Result<f32> {
    schedule.value(step)
}
