use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::LatentBatch;
use super::layout::{permute_into_grids, shuffled_reference_layouts, GridLayout};
use super::tile::{tile4, tile4_mask, untile4};
use crate::backend::DenoiserBackend;
use crate::diffusion::{
    ddim_step, ddim_timesteps, enforce_known, initial_latent, sample_with, standard_normal, Conditioning,
    GuidanceScales, Latent, NoiseSchedule, Tiling,
};
use crate::error::{Error, Result};
use crate::rng::{derive, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointSampleConfig {
    /// Grid reshuffles per denoising step whose predictions are averaged.
    pub m_repeats: usize,
    pub num_steps: usize,
    pub t_start: usize,
    pub scales: GuidanceScales,
    /// Batch index of a view placed in every grid and held fixed.
    pub reference_index: Option<usize>,
    pub seed: u64,
    /// Use these layouts for every repeat of every step instead of
    /// reshuffling. Every batch entry must appear at least once.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_layouts: Option<Vec<GridLayout>>,
}

impl Default for JointSampleConfig {
    fn default() -> Self {
        Self {
            m_repeats: 8,
            num_steps: 20,
            t_start: 1000,
            scales: GuidanceScales::default(),
            reference_index: None,
            seed: 0,
            fixed_layouts: None,
        }
    }
}

impl JointSampleConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.m_repeats == 0 {
            return Err(Error::invalid("m_repeats must be >= 1"));
        }
        if self.num_steps == 0 {
            return Err(Error::invalid("num_steps must be >= 1"));
        }
        sched.check_step(self.t_start)?;
        self.scales.validate()
    }
}

fn init_noise(seed: u64, dim: (usize, usize, usize), i: usize) -> Latent {
    standard_normal(dim, &mut derive(seed, &[tags::INIT_NOISE, i as u64]))
}

fn known_noise(seed: u64, dim: (usize, usize, usize), step: usize, i: usize) -> Latent {
    standard_normal(dim, &mut derive(seed, &[tags::KNOWN_NOISE, step as u64, i as u64]))
}

/// Smallest size >= max(n, 4) of the form 3k + 1.
fn reference_batch_size(n: usize) -> usize {
    let mut m = n.max(4);
    while !(m - 1).is_multiple_of(3) {
        m += 1;
    }
    m
}

/// Pads and adjusts the batch for the configured grid assignment.
fn prepare(batch: &LatentBatch, cfg: &JointSampleConfig) -> Result<LatentBatch> {
    let mut b = batch.clone();
    if let Some(r) = cfg.reference_index {
        if r >= b.len() {
            return Err(Error::invalid(format!(
                "reference index {r} outside batch of {}",
                b.len()
            )));
        }
        b.force_known(r)?;
        let target = reference_batch_size(b.len());
        b.pad_to(target)
    } else if cfg.fixed_layouts.is_some() {
        Ok(b)
    } else {
        let target = b.len().div_ceil(4) * 4;
        b.pad_to(target)
    }
}

fn check_fixed(layouts: &[GridLayout], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for l in layouts {
        for m in l.members() {
            if m >= n {
                return Err(Error::invalid(format!("layout index {m} outside batch of {n}")));
            }
            seen[m] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("fixed layouts never place view {missing}")));
    }
    Ok(())
}

fn layouts_for(cfg: &JointSampleConfig, n: usize, step: usize, repeat: usize) -> Result<Vec<GridLayout>> {
    if let Some(fixed) = &cfg.fixed_layouts {
        return Ok(fixed.clone());
    }
    let mut rng = derive(cfg.seed, &[tags::PERMUTE, step as u64, repeat as u64]);
    match cfg.reference_index {
        Some(r) => shuffled_reference_layouts(n, r, &mut rng),
        None => permute_into_grids(n, &mut rng),
    }
}

/// Every grid assignment used by [`joint_inpaint`] for `batch`, indexed by
/// step then repeat. Indices refer to the prepared (padded) batch.
pub fn planned_layouts(batch: &LatentBatch, cfg: &JointSampleConfig) -> Result<Vec<Vec<Vec<GridLayout>>>> {
    let b = prepare(batch, cfg)?;
    let steps = ddim_timesteps(cfg.t_start, cfg.num_steps).len().saturating_sub(1);
    (0..steps)
        .map(|k| (0..cfg.m_repeats).map(|r| layouts_for(cfg, b.len(), k, r)).collect())
        .collect()
}

fn grid_conditioning(b: &LatentBatch, layout: &GridLayout) -> Result<Conditioning> {
    let m = layout.members();
    let c = |q: usize| &b.conds[m[q]];
    Ok(Conditioning {
        cond_image: tile4([&c(0).cond_image, &c(1).cond_image, &c(2).cond_image, &c(3).cond_image])?,
        cond_mask: tile4_mask([&c(0).cond_mask, &c(1).cond_mask, &c(2).cond_mask, &c(3).cond_mask])?,
        text: c(0).text.clone(),
        drop_image: false,
        drop_text: false,
        tiling: Tiling::Grid2x2,
    })
}

/// Jointly inpaints every view of `batch`.
///
/// Each denoising step reshuffles the views into 2x2 grids `m_repeats`
/// times, predicts noise for every grid, and steps each view once with the
/// mean of its predictions. The batch is padded with fully known views as
/// needed; outputs are returned for the original entries only, in order.
pub fn joint_inpaint(
    backend: &dyn DenoiserBackend,
    batch: &LatentBatch,
    cfg: &JointSampleConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    cfg.validate(sched)?;
    let b = prepare(batch, cfg)?;
    if let Some(fixed) = &cfg.fixed_layouts {
        check_fixed(fixed, b.len())?;
    }
    let n = b.len();
    let dim = b.latent_dim();
    let (h, w, c) = dim;
    backend.descriptor().check_shape(&Latent::zeros((2 * h, 2 * w, c)))?;

    let mut z: Vec<Latent> = (0..n)
        .map(|i| initial_latent(&b.latents[i], &init_noise(cfg.seed, dim, i), cfg.t_start, sched))
        .collect::<Result<_>>()?;

    let timesteps = ddim_timesteps(cfg.t_start, cfg.num_steps);
    for (step, pair) in timesteps.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        for (i, zi) in z.iter_mut().enumerate() {
            let eps = known_noise(cfg.seed, dim, step, i);
            *zi = enforce_known(zi, &b.conds[i].cond_image, &b.masks[i], &eps, t, sched)?;
        }

        let jobs: Vec<GridLayout> = (0..cfg.m_repeats)
            .map(|r| layouts_for(cfg, n, step, r))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let predictions: Vec<[Latent; 4]> = jobs
            .par_iter()
            .enumerate()
            .map(|(g, layout)| {
                let m = layout.members();
                let grid = tile4([&z[m[0]], &z[m[1]], &z[m[2]], &z[m[3]]])?;
                let cond = grid_conditioning(&b, layout)?;
                let eps = backend
                    .predict_guided(&grid, t, &cond, &cfg.scales)
                    .map_err(|e| e.at_step(step, Some(g)))?;
                if eps.dim() != grid.dim() {
                    return Err(
                        Error::shape(format!("backend returned {:?} for grid {:?}", eps.dim(), grid.dim()))
                            .at_step(step, Some(g)),
                    );
                }
                untile4(&eps)
            })
            .collect::<Result<_>>()?;

        let mut sums: Vec<Option<Latent>> = vec![None; n];
        let mut counts = vec![0usize; n];
        for (layout, parts) in jobs.iter().zip(predictions) {
            for (i, p) in layout.members().into_iter().zip(parts) {
                counts[i] += 1;
                match &mut sums[i] {
                    Some(s) => *s += &p,
                    slot @ None => *slot = Some(p),
                }
            }
        }
        for (i, zi) in z.iter_mut().enumerate() {
            let mut eps_hat = sums[i]
                .take()
                .ok_or_else(|| Error::invalid(format!("view {i} was not placed in any grid")))?;
            if counts[i] > 1 {
                let k = counts[i] as f64;
                eps_hat.mapv_inplace(|v| v / k);
            }
            *zi = ddim_step(zi, &eps_hat, t, t_prev, sched)?;
        }
    }

    let zeros = Latent::zeros(dim);
    z.into_iter()
        .enumerate()
        .filter(|(i, _)| !b.padded[*i])
        .map(|(i, zi)| enforce_known(&zi, &b.conds[i].cond_image, &b.masks[i], &zeros, 0, sched))
        .collect()
}

/// Inpaints every view on its own, untiled, with the same noise streams
/// [`joint_inpaint`] would use for it.
pub fn independent_inpaint(
    backend: &dyn DenoiserBackend,
    batch: &LatentBatch,
    cfg: &JointSampleConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    cfg.validate(sched)?;
    let dim = batch.latent_dim();
    (0..batch.len())
        .into_par_iter()
        .filter(|&i| !batch.padded[i])
        .map(|i| {
            let z_init = initial_latent(&batch.latents[i], &init_noise(cfg.seed, dim, i), cfg.t_start, sched)?;
            let cond = batch.conds[i].clone().with_tiling(Tiling::Single);
            sample_with(
                backend,
                &z_init,
                &cond,
                &cfg.scales,
                cfg.num_steps,
                cfg.t_start,
                sched,
                |step| known_noise(cfg.seed, dim, step, i),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_sizes() {
        assert_eq!(reference_batch_size(1), 4);
        assert_eq!(reference_batch_size(4), 4);
        assert_eq!(reference_batch_size(5), 7);
        assert_eq!(reference_batch_size(31), 31);
    }
}
