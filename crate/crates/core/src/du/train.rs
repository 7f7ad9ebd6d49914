use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::depth::{rank_hinge, sample_rank_pairs, DepthPrior};
use super::update::{dataset_update, TrainState, UpdateDiagnostics};
use super::{TrainConfig, TrainMode};
use crate::backend::{Codec, DenoiserBackend};
use crate::data::MultiViewDataset;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::field::{
    save_field, softplus_inv, DepthLoss, FieldOptimizer, RadianceField, RayBatch, RenderOptions, StepStats,
};
use crate::metrics::{default_near_offset, eval_dataset_consistency, MetricReport};
use crate::rng::{derive, tags, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Global iteration, warmup included.
    pub iteration: usize,
    pub loss: f64,
    pub mse: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub loss_curve: Vec<LossPoint>,
    pub updates: Vec<UpdateDiagnostics>,
    pub final_metrics: MetricReport,
    pub known_checksum: String,
    pub known_pixels_verified: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: RadianceField,
    /// The dataset with its latest inpaintings.
    pub dataset: MultiViewDataset,
    pub report: TrainReport,
}

/// Pixels eligible for supervision: known pixels everywhere, unknown
/// pixels only of views that hold an inpainting.
fn eligible_pixels(ds: &MultiViewDataset, inpainted: &[bool], with_unknown: bool) -> Vec<(u32, u32, u32)> {
    let mut out = Vec::new();
    for (v, f) in ds.frames.iter().enumerate() {
        let use_unknown = with_unknown && inpainted[v];
        for ((y, x), &k) in f.known.indexed_iter() {
            if k || use_unknown {
                out.push((v as u32, y as u32, x as u32));
            }
        }
    }
    out
}

struct Batch {
    rays: RayBatch,
    targets: Vec<[f64; 3]>,
    /// Prior depth of each ray that falls on an unknown pixel.
    prior: Vec<Option<f64>>,
}

fn draw_batch(
    ds: &MultiViewDataset,
    pool: &[(u32, u32, u32)],
    count: usize,
    depth: &DepthPrior,
    rng: &mut Rng,
) -> Result<Batch> {
    let mut origins = Vec::with_capacity(count);
    let mut dirs = Vec::with_capacity(count);
    let mut ids = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    let mut prior = Vec::with_capacity(count);
    for _ in 0..count {
        let idx = rng.gen_range(0..pool.len());
        let (v, y, x) = pool[idx];
        let (v, y, x) = (v as usize, y as usize, x as usize);
        let f = &ds.frames[v];
        let (o, d) = f.camera.pixel_ray(x, y);
        origins.push(o);
        dirs.push(d);
        ids.push(idx);
        targets.push([0, 1, 2].map(|c| f.image[[y, x, c]] as f64));
        prior.push(if f.known[[y, x]] || !depth.is_active() {
            None
        } else {
            depth.at(v, y, x)
        });
    }
    Ok(Batch {
        rays: RayBatch::new(origins, dirs, ds.near, ds.far, ids)?,
        targets,
        prior,
    })
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    depth_prior: &'a DepthPrior,
    opt: FieldOptimizer,
    opts: RenderOptions,
    ray_rng: Rng,
    depth_rng: Rng,
    margin: f64,
    curve: Vec<LossPoint>,
    window: Vec<StepStats>,
    checkpoint: Option<&'a Path>,
}

impl Trainer<'_> {
    fn step(&mut self, state: &mut TrainState, pool: &[(u32, u32, u32)], global_iter: usize) -> Result<()> {
        if pool.is_empty() {
            return Err(Error::invalid("no supervised pixels: every pixel is unknown"));
        }
        let batch = draw_batch(
            &state.dataset,
            pool,
            self.cfg.rays_per_batch,
            self.depth_prior,
            &mut self.ray_rng,
        )?;
        let unknown: Vec<usize> = (0..batch.prior.len()).filter(|&i| batch.prior[i].is_some()).collect();
        let use_depth = self.cfg.loss.depth != 0.0 && unknown.len() >= 2;
        let pairs = if use_depth {
            let prior: Vec<f64> = unknown.iter().map(|&i| batch.prior[i].unwrap_or(0.0)).collect();
            sample_rank_pairs(
                &prior,
                self.cfg.depth.pair_count,
                self.cfg.depth.tie_threshold,
                &mut self.depth_rng,
            )?
            .into_iter()
            .map(|(a, b)| (unknown[a], unknown[b]))
            .collect()
        } else {
            Vec::new()
        };
        let margin = self.margin;
        let depth_fn = move |d: &[f64]| rank_hinge(d, &pairs, margin);
        let depth_loss: Option<&DepthLoss<'_>> = if use_depth { Some(&depth_fn) } else { None };
        let result = self.opt.train_step(
            &mut state.field,
            &batch.rays,
            &batch.targets,
            &self.cfg.loss,
            &self.opts,
            Some(&mut self.ray_rng),
            depth_loss,
        );
        let stats = match result {
            Ok(s) => s,
            Err(Error::NonFinite(msg)) => {
                let saved = match self.checkpoint {
                    Some(p) => {
                        save_field(&state.field, p)?;
                        format!("; last good checkpoint saved to {}", p.display())
                    }
                    None => String::new(),
                };
                return Err(Error::NonFinite(format!(
                    "training diverged at iteration {global_iter}: {msg}{saved}"
                )));
            }
            Err(e) => return Err(e),
        };
        self.window.push(stats);
        if self.window.len() >= self.cfg.log_every {
            let n = self.window.len() as f64;
            self.curve.push(LossPoint {
                iteration: global_iter + 1,
                loss: self.window.iter().map(|s| s.loss).sum::<f64>() / n,
                mse: self.window.iter().map(|s| s.mse).sum::<f64>() / n,
                depth: self.window.iter().map(|s| s.depth).sum::<f64>() / n,
            });
            self.window.clear();
        }
        Ok(())
    }
}

/// Fits a field to the known pixels, then alternates training on known and
/// inpainted pixels with dataset updates every `update_interval` iterations.
///
/// A non-finite loss aborts the run; when `checkpoint` is given the last
/// good field is written there first.
pub fn run_training(
    cfg: &TrainConfig,
    dataset: &MultiViewDataset,
    backend: &dyn DenoiserBackend,
    codec: &dyn Codec,
    sched: &NoiseSchedule,
    depth_prior: &DepthPrior,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset.validate()?;
    depth_prior.validate()?;
    if depth_prior.is_active() && depth_prior.maps.len() != dataset.len() {
        return Err(Error::invalid(format!(
            "depth prior has {} maps for {} views",
            depth_prior.maps.len(),
            dataset.len()
        )));
    }
    let bounds = dataset
        .bounds
        .ok_or_else(|| Error::invalid("training needs dataset bounds (aabb in the manifest)"))?;
    let checksum = dataset.known_checksum();
    let r = cfg.field_resolution;
    let field = RadianceField::constant(
        [r; 3],
        bounds,
        dataset.background,
        softplus_inv(cfg.init_density),
        [0.0; 3],
    )?;
    let opts = RenderOptions {
        near: dataset.near,
        far: dataset.far,
        ..cfg.render
    };
    let mut trainer = Trainer {
        cfg,
        depth_prior,
        opt: FieldOptimizer::new(&field, cfg.optimizer)?,
        opts,
        ray_rng: derive(cfg.seed, &[tags::TRAINER]),
        depth_rng: derive(cfg.seed, &[tags::DEPTH]),
        margin: cfg.depth.margin_fraction * bounds.diagonal(),
        curve: Vec::new(),
        window: Vec::new(),
        checkpoint,
    };
    let mut state = TrainState::new(field, dataset.clone());
    let mut updates = Vec::new();

    let known_pool = eligible_pixels(&state.dataset, &state.inpainted, false);
    for it in 0..cfg.warmup_iterations {
        trainer.step(&mut state, &known_pool, it)?;
    }

    let mut pool = known_pool;
    for it in 0..cfg.total_iterations {
        state.iteration = it;
        let due = match cfg.mode {
            TrainMode::MaskedOnly => false,
            TrainMode::InpaintOnce => it == 0,
            _ => it % cfg.update_interval == 0,
        };
        if due {
            let diag = dataset_update(&mut state, cfg, backend, codec, sched)?;
            log::info!(
                "update {} at iteration {}: level {:.3}, render-vs-inpaint PSNR {:?}",
                diag.update_index,
                it,
                diag.level,
                diag.mean_psnr_unknown
            );
            updates.push(diag);
            pool = eligible_pixels(&state.dataset, &state.inpainted, true);
        }
        trainer.step(&mut state, &pool, cfg.warmup_iterations + it)?;
    }
    state.iteration = cfg.total_iterations;

    let verified = state.dataset.known_checksum() == checksum;
    if !verified {
        return Err(Error::invalid("known pixels changed during training"));
    }
    let near_offset = cfg
        .eval_near_offset
        .unwrap_or_else(|| default_near_offset(&state.dataset));
    let final_metrics = eval_dataset_consistency(&state.field, &state.dataset, &cfg.render, near_offset)?;
    Ok(TrainOutcome {
        report: TrainReport {
            config: cfg.clone(),
            loss_curve: trainer.curve,
            updates,
            final_metrics,
            known_checksum: checksum,
            known_pixels_verified: verified,
        },
        field: state.field,
        dataset: state.dataset,
    })
}
