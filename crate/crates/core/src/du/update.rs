use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{anneal_t, LevelSchedule, TrainConfig, TrainMode};
use crate::backend::{Codec, DenoiserBackend};
use crate::data::{Image, MultiViewDataset, PixelMask};
use crate::diffusion::{LatentMask, NoiseSchedule};
use crate::error::{Error, Result};
use crate::field::{render_view, RadianceField, RenderOptions};
use crate::grid::{independent_inpaint, joint_inpaint, JointSampleConfig, LatentBatch};
use crate::metrics::psnr;
use crate::rng::{derive, derive_seed, tags};

/// Mutable training state shared by the update and the optimizer loop.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub field: RadianceField,
    pub dataset: MultiViewDataset,
    /// Iteration within the update phase.
    pub iteration: usize,
    /// Next view in the round-robin order.
    pub cursor: usize,
    pub updates_done: usize,
    /// Views whose unknown pixels hold an inpainting.
    pub inpainted: Vec<bool>,
}

impl TrainState {
    pub fn new(field: RadianceField, dataset: MultiViewDataset) -> Self {
        let n = dataset.len();
        Self {
            field,
            dataset,
            iteration: 0,
            cursor: 0,
            updates_done: 0,
            inpainted: vec![false; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub iteration: usize,
    pub update_index: usize,
    /// Noise level in [0, 1].
    pub level: f64,
    pub timestep: usize,
    pub views: Vec<usize>,
    /// PSNR between the render and the new inpainting over unknown pixels;
    /// absent for views without unknown pixels.
    pub psnr_unknown: Vec<Option<f64>>,
    pub mean_psnr_unknown: Option<f64>,
    /// Set when the update failed and the dataset was left as it was.
    pub error: Option<String>,
}

/// Latent-resolution mask: a latent cell is known only when every pixel
/// it covers is known.
pub fn latent_mask(known: &PixelMask, scale: usize) -> Result<LatentMask> {
    let (h, w) = known.dim();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::shape(format!(
            "{w}x{h} image is not divisible by codec scale {scale}"
        )));
    }
    Ok(LatentMask::from_shape_fn((h / scale, w / scale), |(y, x)| {
        let all = (0..scale).all(|dy| (0..scale).all(|dx| known[[y * scale + dy, x * scale + dx]]));
        if all {
            1.0
        } else {
            0.0
        }
    }))
}

fn select_views(state: &TrainState, cfg: &TrainConfig) -> Vec<usize> {
    let n = state.dataset.len();
    if cfg.mode == TrainMode::InpaintOnce || cfg.batch_views >= n {
        return (0..n).collect();
    }
    (0..cfg.batch_views).map(|k| (state.cursor + k) % n).collect()
}

fn update_level(state: &TrainState, cfg: &TrainConfig) -> f64 {
    if cfg.mode == TrainMode::InpaintOnce {
        return 1.0;
    }
    match cfg.noise_schedule {
        LevelSchedule::Linear => anneal_t(state.iteration, cfg.total_iterations, cfg.t_min),
        LevelSchedule::Random => {
            let [lo, hi] = cfg.random_level_range;
            let mut rng = derive(cfg.seed, &[tags::UPDATE, state.updates_done as u64, 1]);
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        }
    }
}

struct Proposal {
    views: Vec<usize>,
    images: Vec<Image>,
    psnr_unknown: Vec<Option<f64>>,
}

fn propose(
    state: &TrainState,
    cfg: &TrainConfig,
    backend: &dyn DenoiserBackend,
    codec: &dyn Codec,
    sched: &NoiseSchedule,
    views: &[usize],
    timestep: usize,
) -> Result<Proposal> {
    let ds = &state.dataset;
    let opts = RenderOptions {
        near: ds.near,
        far: ds.far,
        ..cfg.render
    };
    let renders: Vec<Image> = views
        .par_iter()
        .map(|&v| render_view(&state.field, &ds.frames[v].camera, &opts, None).map(|r| r.rgb))
        .collect::<Result<_>>()?;

    let scale = codec.scale_factor();
    let mut latents = Vec::with_capacity(views.len());
    let mut masks = Vec::with_capacity(views.len());
    for (&v, render) in views.iter().zip(&renders) {
        let f = &ds.frames[v];
        let mut composite = render.clone();
        for ((y, x), &k) in f.known.indexed_iter() {
            if k {
                for c in 0..3 {
                    composite[[y, x, c]] = f.image[[y, x, c]];
                }
            }
        }
        latents.push(codec.encode(&composite)?);
        masks.push(latent_mask(&f.known, scale)?);
    }
    let batch = LatentBatch::new(latents, masks, views.to_vec())?.with_text(cfg.text.clone());
    let sample_cfg = JointSampleConfig {
        m_repeats: cfg.m_repeats,
        num_steps: cfg.num_steps,
        t_start: timestep,
        scales: cfg.scales,
        reference_index: None,
        seed: derive_seed(cfg.seed, &[tags::UPDATE, state.updates_done as u64]),
        fixed_layouts: None,
    };
    let out = match cfg.mode {
        TrainMode::JointDu => joint_inpaint(backend, &batch, &sample_cfg, sched)?,
        _ => independent_inpaint(backend, &batch, &sample_cfg, sched)?,
    };

    let mut images = Vec::with_capacity(views.len());
    let mut psnr_unknown = Vec::with_capacity(views.len());
    for ((&v, z), render) in views.iter().zip(&out).zip(&renders) {
        let f = &ds.frames[v];
        let decoded = codec.decode(z)?;
        if decoded.dim() != f.image.dim() {
            return Err(Error::shape(format!(
                "codec decoded {:?} for a {:?} view",
                decoded.dim(),
                f.image.dim()
            )));
        }
        let mut image = f.image.clone();
        for ((y, x), &k) in f.known.indexed_iter() {
            if !k {
                for c in 0..3 {
                    let val = decoded[[y, x, c]];
                    if !val.is_finite() {
                        return Err(Error::NonFinite(format!("decoded inpainting of view {v}")));
                    }
                    image[[y, x, c]] = val.clamp(0.0, 1.0);
                }
            }
        }
        let unknown = f.known.mapv(|k| !k);
        psnr_unknown.push(if unknown.iter().any(|&u| u) {
            Some(psnr(render, &image, Some(&unknown))?)
        } else {
            None
        });
        images.push(image);
    }
    Ok(Proposal {
        views: views.to_vec(),
        images,
        psnr_unknown,
    })
}

/// Re-inpaints the next batch of views from renders of the current field.
///
/// The new images are built aside and swapped in only when every view
/// succeeded; a backend failure is recorded in the diagnostics and leaves
/// the dataset untouched. Only unknown pixels are ever written.
pub fn dataset_update(
    state: &mut TrainState,
    cfg: &TrainConfig,
    backend: &dyn DenoiserBackend,
    codec: &dyn Codec,
    sched: &NoiseSchedule,
) -> Result<UpdateDiagnostics> {
    let views = select_views(state, cfg);
    let level = update_level(state, cfg);
    let timestep = sched.step_for_level(level);
    let mut diag = UpdateDiagnostics {
        iteration: state.iteration,
        update_index: state.updates_done,
        level,
        timestep,
        views: views.clone(),
        psnr_unknown: Vec::new(),
        mean_psnr_unknown: None,
        error: None,
    };
    match propose(state, cfg, backend, codec, sched, &views, timestep) {
        Ok(p) => {
            for (&v, image) in p.views.iter().zip(p.images) {
                state.dataset.frames[v].image = image;
                state.inpainted[v] = true;
            }
            let valid: Vec<f64> = p.psnr_unknown.iter().flatten().copied().collect();
            diag.mean_psnr_unknown = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
            diag.psnr_unknown = p.psnr_unknown;
        }
        Err(e) if e.is_backend() => {
            log::warn!(
                "dataset update {} failed, keeping previous images: {e}",
                state.updates_done
            );
            diag.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    state.cursor = (state.cursor + views.len()) % state.dataset.len().max(1);
    state.updates_done += 1;
    Ok(diag)
}
