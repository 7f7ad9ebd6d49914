use serde::{Deserialize, Serialize};

use super::render::{RayBatch, RayTape, RenderOptions};
use super::{RadianceField, PARAMS_PER_VOXEL};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Weights of the photometric and depth terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mse: f64,
    /// Mean absolute color error over the ray batch (rays are drawn as
    /// image patches by the trainer).
    pub l1: f64,
    /// Scale of the caller-supplied depth term.
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            l1: 0.1,
            depth: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// The loss is a mean over rays and channels while each voxel sees only
    /// a few samples, so useful rates are large.
    pub learning_rate: f64,
    pub momentum: f64,
    /// Learning-rate multiplier for raw density.
    pub density_lr_scale: f64,
    /// Learning-rate multiplier for raw color.
    pub color_lr_scale: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3.0e4,
            momentum: 0.9,
            density_lr_scale: 0.3,
            color_lr_scale: 3.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.density_lr_scale >= 0.0 && self.color_lr_scale >= 0.0) {
            return Err(Error::invalid("learning-rate scales must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    /// Weighted total, before the update.
    pub loss: f64,
    pub mse: f64,
    pub l1: f64,
    pub depth: f64,
    pub grad_norm: f64,
}

/// Extra loss on rendered depths: returns the loss and its gradient with
/// respect to each ray's depth.
pub type DepthLoss<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;

/// Gradient descent with momentum on the raw field parameters.
#[derive(Debug, Clone)]
pub struct FieldOptimizer {
    config: OptimizerConfig,
    velocity: Vec<f64>,
    grad: Vec<f64>,
    /// Voxels with a possibly nonzero gradient entry.
    touched: Vec<usize>,
    touched_flag: Vec<bool>,
}

impl FieldOptimizer {
    pub fn new(field: &RadianceField, config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        let n = field.params().len();
        Ok(Self {
            config,
            velocity: vec![0.0; n],
            grad: vec![0.0; n],
            touched: Vec::new(),
            touched_flag: vec![false; n / PARAMS_PER_VOXEL],
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Gradient from the last [`Self::loss_and_grad`] call.
    pub fn gradient(&self) -> &[f64] {
        &self.grad
    }

    /// Evaluates the loss and stores its gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &mut self,
        field: &RadianceField,
        rays: &RayBatch,
        targets: &[[f64; 3]],
        weights: &LossWeights,
        opts: &RenderOptions,
        jitter: Option<&mut Rng>,
        depth_loss: Option<&DepthLoss<'_>>,
    ) -> Result<StepStats> {
        if self.grad.len() != field.params().len() {
            return Err(Error::shape("optimizer was built for a different field"));
        }
        if targets.len() != rays.len() {
            return Err(Error::shape(format!(
                "{} rays but {} targets",
                rays.len(),
                targets.len()
            )));
        }
        if rays.is_empty() {
            return Err(Error::invalid("empty ray batch"));
        }
        let tape = RayTape::forward(field, rays, opts, jitter)?;
        let k = rays.len();
        let norm = 1.0 / (3 * k) as f64;
        let mut mse = 0.0;
        let mut l1 = 0.0;
        let mut d_rgb = vec![[0.0; 3]; k];
        for (i, out) in tape.outputs.iter().enumerate() {
            for c in 0..3 {
                let diff = out.rgb[c] - targets[i][c];
                mse += diff * diff * norm;
                l1 += diff.abs() * norm;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                d_rgb[i][c] = weights.mse * 2.0 * diff * norm + weights.l1 * sign * norm;
            }
        }
        let mut depth = 0.0;
        let mut d_depth = vec![0.0; k];
        if let Some(f) = depth_loss.filter(|_| weights.depth != 0.0) {
            let depths: Vec<f64> = tape.outputs.iter().map(|o| o.depth).collect();
            let (l, g) = f(&depths);
            if g.len() != k {
                return Err(Error::shape(format!(
                    "depth loss returned {} gradients for {k} rays",
                    g.len()
                )));
            }
            depth = l;
            for (d, g) in d_depth.iter_mut().zip(g) {
                *d = weights.depth * g;
            }
        }
        for &v in &self.touched {
            self.grad[v * PARAMS_PER_VOXEL..(v + 1) * PARAMS_PER_VOXEL].fill(0.0);
            self.touched_flag[v] = false;
        }
        self.touched.clear();
        tape.backward(&d_rgb, &d_depth, &mut self.grad)?;
        tape.mark_voxels(&mut self.touched_flag, &mut self.touched);
        let loss = weights.mse * mse + weights.l1 * l1 + weights.depth * depth;
        let grad_norm = self
            .touched
            .iter()
            .flat_map(|&v| &self.grad[v * PARAMS_PER_VOXEL..(v + 1) * PARAMS_PER_VOXEL])
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        Ok(StepStats {
            loss,
            mse,
            l1,
            depth,
            grad_norm,
        })
    }

    /// One optimization step at learning rate `lr`; returns the pre-update
    /// loss. A non-finite loss or gradient leaves the field untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        field: &mut RadianceField,
        rays: &RayBatch,
        targets: &[[f64; 3]],
        weights: &LossWeights,
        opts: &RenderOptions,
        lr: f64,
        jitter: Option<&mut Rng>,
        depth_loss: Option<&DepthLoss<'_>>,
    ) -> Result<StepStats> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        let stats = self.loss_and_grad(field, rays, targets, weights, opts, jitter, depth_loss)?;
        if !stats.loss.is_finite() || !stats.grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} (mse {}, l1 {}, depth {}), gradient norm {}",
                stats.loss, stats.mse, stats.l1, stats.depth, stats.grad_norm
            )));
        }
        let mu = self.config.momentum;
        let scales = [
            lr * self.config.density_lr_scale,
            lr * self.config.color_lr_scale,
            lr * self.config.color_lr_scale,
            lr * self.config.color_lr_scale,
        ];
        let params = field.params_mut();
        for ((p, v), g) in params
            .chunks_exact_mut(PARAMS_PER_VOXEL)
            .zip(self.velocity.chunks_exact_mut(PARAMS_PER_VOXEL))
            .zip(self.grad.chunks_exact(PARAMS_PER_VOXEL))
        {
            for c in 0..PARAMS_PER_VOXEL {
                v[c] = mu * v[c] + g[c];
                p[c] -= scales[c] * v[c];
            }
        }
        Ok(stats)
    }

    /// Step using the configured learning rate.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        field: &mut RadianceField,
        rays: &RayBatch,
        targets: &[[f64; 3]],
        weights: &LossWeights,
        opts: &RenderOptions,
        jitter: Option<&mut Rng>,
        depth_loss: Option<&DepthLoss<'_>>,
    ) -> Result<StepStats> {
        let lr = self.config.learning_rate;
        self.step(field, rays, targets, weights, opts, lr, jitter, depth_loss)
    }
}
