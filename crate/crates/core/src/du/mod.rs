//! Iterative dataset update: radiance-field training interleaved with
//! re-inpainting of the unknown pixels of the training views.

mod depth;
mod train;
mod update;

pub use depth::{depth_rank_loss, rank_hinge, sample_rank_pairs, DepthPrior, DepthSource};
pub use train::{run_training, LossPoint, TrainOutcome, TrainReport};
pub use update::{dataset_update, latent_mask, TrainState, UpdateDiagnostics};

use serde::{Deserialize, Serialize};

use crate::diffusion::GuidanceScales;
use crate::error::{Error, Result};
use crate::field::{LossWeights, OptimizerConfig, RenderOptions};

/// Noise level for an update at `iteration` of `total`: linear from 1 at
/// the start down to `t_min` at the end.
pub fn anneal_t(iteration: usize, total: usize, t_min: f64) -> f64 {
    if total == 0 || iteration >= total {
        return t_min;
    }
    1.0 - (1.0 - t_min) * (iteration as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Grid-tiled joint inpainting every `update_interval` iterations.
    #[default]
    JointDu,
    /// Per-view inpainting every `update_interval` iterations.
    IndependentDu,
    /// One per-view inpainting of every view at full noise, then plain
    /// training.
    InpaintOnce,
    /// Known pixels only, no inpainting.
    MaskedOnly,
}

impl TrainMode {
    pub fn updates(self) -> bool {
        self != TrainMode::MaskedOnly
    }
}

/// How the noise level of successive updates is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelSchedule {
    #[default]
    Linear,
    /// Uniform in `random_level_range` per update.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthRankConfig {
    pub pair_count: usize,
    /// Hinge margin as a fraction of the scene diagonal.
    pub margin_fraction: f64,
    /// Relative prior-depth difference below which a pair is a tie.
    pub tie_threshold: f64,
    /// Multiplicative noise on synthetic ground-truth priors.
    pub prior_noise: f64,
}

impl Default for DepthRankConfig {
    fn default() -> Self {
        Self {
            pair_count: 512,
            margin_fraction: 1e-3,
            tie_threshold: 0.01,
            prior_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub noise_schedule: LevelSchedule,
    pub random_level_range: [f64; 2],
    /// Iterations after the known-pixel warmup.
    pub total_iterations: usize,
    /// Known-pixel-only iterations before the first update.
    pub warmup_iterations: usize,
    pub update_interval: usize,
    pub t_min: f64,
    /// Views re-inpainted per update.
    pub batch_views: usize,
    pub m_repeats: usize,
    pub num_steps: usize,
    pub scales: GuidanceScales,
    pub text: Option<String>,
    pub rays_per_batch: usize,
    pub field_resolution: usize,
    /// Initial density everywhere, per world unit.
    pub init_density: f64,
    pub render: RenderOptions,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub depth: DepthRankConfig,
    /// Near-plane offset for the final evaluation; default is a fraction of
    /// the scene diagonal.
    pub eval_near_offset: Option<f64>,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::JointDu,
            noise_schedule: LevelSchedule::Linear,
            random_level_range: [0.02, 0.98],
            total_iterations: 30_000,
            warmup_iterations: 2_000,
            update_interval: 500,
            t_min: 0.4,
            batch_views: 40,
            m_repeats: 8,
            num_steps: 20,
            scales: GuidanceScales::default(),
            text: None,
            rays_per_batch: 1024,
            field_resolution: 64,
            init_density: 0.1,
            render: RenderOptions::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            depth: DepthRankConfig::default(),
            eval_near_offset: None,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::invalid(format!("t_min must be in (0, 1), got {}", self.t_min)));
        }
        let [lo, hi] = self.random_level_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("random_level_range must satisfy 0 <= lo <= hi <= 1"));
        }
        for (name, v) in [
            ("update_interval", self.update_interval),
            ("batch_views", self.batch_views),
            ("m_repeats", self.m_repeats),
            ("num_steps", self.num_steps),
            ("rays_per_batch", self.rays_per_batch),
            ("field_resolution", self.field_resolution),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.init_density > 0.0 && self.init_density.is_finite()) {
            return Err(Error::invalid("init_density must be positive"));
        }
        if let Some(o) = self.eval_near_offset {
            if !(o >= 0.0 && o.is_finite()) {
                return Err(Error::invalid("eval_near_offset must be >= 0"));
            }
        }
        if self.loss.depth != 0.0 && !(self.depth.margin_fraction > 0.0) {
            return Err(Error::invalid("depth margin_fraction must be > 0"));
        }
        self.scales.validate()?;
        self.render.validate()?;
        self.optimizer.validate()
    }
}
