use rand_distr::StandardNormal;

use super::ops::{add_noise, check_mask, ddim_step, enforce_known, Conditioning, GuidanceScales, Latent};
use super::schedule::{ddim_timesteps, NoiseSchedule};
use crate::backend::DenoiserBackend;
use crate::error::{Error, Result};

/// Draws a tensor of independent unit Gaussians.
pub fn standard_normal<R: rand::Rng + ?Sized>(dim: (usize, usize, usize), rng: &mut R) -> Latent {
    Latent::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal))
}

fn dim_of(z: &Latent) -> (usize, usize, usize) {
    (z.shape()[0], z.shape()[1], z.shape()[2])
}

/// Inpaints one latent with deterministic DDIM.
///
/// Runs `num_steps` evenly spaced steps from `t_start` to 0. Before each
/// backend call the known region (`cond.cond_mask == 1`) is reset to
/// `cond.cond_image` noised to the current level with fresh noise from
/// `rng`; after the last step it is reset to the clean known values.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: rand::Rng + ?Sized>(
    backend: &dyn DenoiserBackend,
    z_init: &Latent,
    cond: &Conditioning,
    scales: &GuidanceScales,
    num_steps: usize,
    t_start: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Latent> {
    let dim = dim_of(z_init);
    sample_with(backend, z_init, cond, scales, num_steps, t_start, sched, |_| {
        standard_normal(dim, rng)
    })
}

/// [`sample`] with the known-region noise supplied per step by
/// `known_noise(step_index)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_with<F>(
    backend: &dyn DenoiserBackend,
    z_init: &Latent,
    cond: &Conditioning,
    scales: &GuidanceScales,
    num_steps: usize,
    t_start: usize,
    sched: &NoiseSchedule,
    mut known_noise: F,
) -> Result<Latent>
where
    F: FnMut(usize) -> Latent,
{
    if num_steps == 0 {
        return Err(Error::invalid("num_steps must be >= 1"));
    }
    sched.check_step(t_start)?;
    scales.validate()?;
    check_mask(z_init, &cond.cond_mask)?;
    if z_init.shape() != cond.cond_image.shape() {
        return Err(Error::shape(format!(
            "z_init {:?} vs cond_image {:?}",
            z_init.shape(),
            cond.cond_image.shape()
        )));
    }
    backend.descriptor().check_shape(z_init)?;

    let timesteps = ddim_timesteps(t_start, num_steps);
    let mut z = z_init.clone();
    for (step, pair) in timesteps.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let eps_known = known_noise(step);
        z = enforce_known(&z, &cond.cond_image, &cond.cond_mask, &eps_known, t, sched)?;
        let eps_hat = backend
            .predict_guided(&z, t, cond, scales)
            .map_err(|e| e.at_step(step, None))?;
        if eps_hat.shape() != z.shape() {
            return Err(Error::shape(format!(
                "backend returned {:?} for latent {:?}",
                eps_hat.shape(),
                z.shape()
            ))
            .at_step(step, None));
        }
        z = ddim_step(&z, &eps_hat, t, t_prev, sched)?;
    }
    let zeros = Latent::zeros(z.raw_dim());
    enforce_known(&z, &cond.cond_image, &cond.cond_mask, &zeros, 0, sched)
}

/// Starting latent for a run from `t_start`: pure noise at the final step,
/// otherwise `content` noised to `t_start`.
pub fn initial_latent(content: &Latent, eps: &Latent, t_start: usize, sched: &NoiseSchedule) -> Result<Latent> {
    if t_start >= sched.num_train_steps() {
        Ok(eps.clone())
    } else {
        add_noise(content, eps, t_start, sched)
    }
}
