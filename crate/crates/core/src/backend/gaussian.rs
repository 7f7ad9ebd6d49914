use std::sync::Arc;

use ndarray::{Axis, Zip};

use super::{BackendDescriptor, DenoiserBackend};
use crate::diffusion::{Conditioning, Latent, NoiseSchedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum PriorMean {
    Scalar(f64),
    PerChannel(Vec<f64>),
    /// Must match the shape of every latent the backend sees.
    Tensor(Latent),
}

impl From<f64> for PriorMean {
    fn from(v: f64) -> Self {
        PriorMean::Scalar(v)
    }
}

impl PriorMean {
    fn materialize(&self, shape: &[usize]) -> Result<Latent> {
        let dim = (shape[0], shape[1], shape[2]);
        match self {
            PriorMean::Scalar(v) => Ok(Latent::from_elem(dim, *v)),
            PriorMean::PerChannel(vs) => {
                if vs.len() != dim.2 {
                    return Err(Error::shape(format!(
                        "prior mean has {} channels, latent has {}",
                        vs.len(),
                        dim.2
                    )));
                }
                Ok(Latent::from_shape_fn(dim, |(_, _, c)| vs[c]))
            }
            PriorMean::Tensor(t) => {
                if t.shape() != shape {
                    return Err(Error::shape(format!(
                        "prior mean {:?} vs latent {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Ok(t.clone())
            }
        }
    }
}

/// Exact minimum-MSE denoiser for a Gaussian prior on clean latents.
///
/// The prior is `N(mu, sigma^2 I)`, optionally with an extra per-channel
/// component shared by every position of the input (`shared_sigma`), i.e.
/// covariance `sigma^2 I + shared_sigma^2 11^T` per channel. The shared
/// component couples all positions of one input, so quadrants of a tiled
/// grid inform each other.
#[derive(Debug, Clone)]
pub struct AnalyticGaussian {
    mu: PriorMean,
    sigma: f64,
    shared_sigma: f64,
    sched: Arc<NoiseSchedule>,
}

pub fn make_analytic_gaussian(
    mu: impl Into<PriorMean>,
    sigma: f64,
    sched: Arc<NoiseSchedule>,
) -> Result<AnalyticGaussian> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(AnalyticGaussian {
        mu: mu.into(),
        sigma,
        shared_sigma: 0.0,
        sched,
    })
}

impl AnalyticGaussian {
    pub fn with_shared_sigma(mut self, shared_sigma: f64) -> Result<Self> {
        if !(shared_sigma >= 0.0 && shared_sigma.is_finite()) {
            return Err(Error::invalid(format!("shared_sigma must be >= 0, got {shared_sigma}")));
        }
        self.shared_sigma = shared_sigma;
        Ok(self)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn schedule(&self) -> &Arc<NoiseSchedule> {
        &self.sched
    }

    /// Posterior mean `E[z0 | z_t]` at signal level `alpha_bar`.
    pub fn posterior_mean_at(&self, z: &Latent, alpha_bar: f64) -> Result<Latent> {
        let mu = self.mu.materialize(z.shape())?;
        if alpha_bar >= 1.0 {
            return Ok(z.clone());
        }
        let sa = alpha_bar.sqrt();
        let var = self.sigma * self.sigma;
        let k_pix = sa * var / (alpha_bar * var + 1.0 - alpha_bar);
        let residual = Zip::from(z).and(&mu).map_collect(|&z, &m| z - sa * m);
        let mut out = Zip::from(&residual).and(&mu).map_collect(|&r, &m| m + k_pix * r);
        if self.shared_sigma > 0.0 {
            let n = (z.shape()[0] * z.shape()[1]) as f64;
            let lambda = var + n * self.shared_sigma * self.shared_sigma;
            let k_shared = sa * lambda / (alpha_bar * lambda + 1.0 - alpha_bar);
            let means = residual
                .mean_axis(Axis(0))
                .and_then(|m| m.mean_axis(Axis(0)))
                .expect("non-empty latent");
            for ((_, _, c), v) in out.indexed_iter_mut() {
                *v += (k_shared - k_pix) * means[c];
            }
        }
        Ok(out)
    }

    pub fn posterior_mean(&self, z: &Latent, t: usize) -> Result<Latent> {
        self.sched.check_step(t)?;
        self.posterior_mean_at(z, self.sched.alpha_bar(t))
    }

    /// Noise estimate at signal level `alpha_bar`; zero at `alpha_bar = 1`.
    pub fn noise_at(&self, z: &Latent, alpha_bar: f64) -> Result<Latent> {
        if alpha_bar >= 1.0 {
            return Ok(Latent::zeros(z.raw_dim()));
        }
        let z0 = self.posterior_mean_at(z, alpha_bar)?;
        Ok(noise_from_clean(z, &z0, alpha_bar))
    }
}

/// The noise implied by a clean estimate: `(z - sqrt(ab) z0) / sqrt(1 - ab)`.
pub(crate) fn noise_from_clean(z: &Latent, z0: &Latent, alpha_bar: f64) -> Latent {
    if alpha_bar >= 1.0 {
        return Latent::zeros(z.raw_dim());
    }
    let sa = alpha_bar.sqrt();
    let sb = (1.0 - alpha_bar).sqrt();
    Zip::from(z).and(z0).map_collect(|&z, &c| (z - sa * c) / sb)
}

impl DenoiserBackend for AnalyticGaussian {
    fn descriptor(&self) -> BackendDescriptor {
        let latent_shape = match &self.mu {
            PriorMean::Tensor(t) => [t.shape()[0], t.shape()[1], t.shape()[2]],
            PriorMean::PerChannel(v) => [0, 0, v.len()],
            PriorMean::Scalar(_) => [0; 3],
        };
        BackendDescriptor {
            name: "analytic-gaussian".into(),
            latent_shape,
            supports_text: false,
            grid_aware: false,
            deterministic: true,
        }
    }

    fn predict_noise(&self, z_t: &Latent, t: usize, _cond: &Conditioning) -> Result<Latent> {
        self.sched.check_step(t)?;
        self.noise_at(z_t, self.sched.alpha_bar(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{add_noise, make_schedule, LatentMask, ScheduleKind};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn sched() -> Arc<NoiseSchedule> {
        Arc::new(make_schedule(ScheduleKind::Linear, 1000).unwrap())
    }

    #[test]
    fn closed_form_at_half_signal() {
        // mu = 0, sigma = 1, ab = 0.5: E[z0|z] = z/sqrt(2), eps = z/sqrt(2).
        let g = make_analytic_gaussian(0.0, 1.0, sched()).unwrap();
        let z = Latent::from_elem((1, 1, 1), 1.3);
        let eps = g.noise_at(&z, 0.5).unwrap();
        assert!((eps[[0, 0, 0]] - 1.3 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_posterior_formula() {
        let (mu, sigma, ab): (f64, f64, f64) = (0.4, 0.6, 0.3);
        let g = make_analytic_gaussian(mu, sigma, sched()).unwrap();
        let z = Latent::from_elem((1, 1, 1), -0.8);
        let zt = -0.8;
        let post = mu + sigma * sigma * ab.sqrt() / (ab * sigma * sigma + 1.0 - ab) * (zt - ab.sqrt() * mu);
        let expected = (zt - ab.sqrt() * post) / (1.0 - ab).sqrt();
        assert!((g.noise_at(&z, ab).unwrap()[[0, 0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn uninformative_prior_predicts_zero() {
        let g = make_analytic_gaussian(0.0, 1e6, sched()).unwrap();
        let z = Latent::from_elem((2, 2, 1), 0.9);
        let eps = g.noise_at(&z, 0.3).unwrap();
        assert!(eps.iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn clean_endpoint_is_zero() {
        let g = make_analytic_gaussian(0.0, 1.0, sched()).unwrap();
        let z = Latent::from_elem((2, 2, 1), 0.9);
        let cond = Conditioning::from_known(&z, &LatentMask::ones((2, 2))).unwrap();
        assert!(g.predict_noise(&z, 0, &cond).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(make_analytic_gaussian(0.0, 0.0, sched()).is_err());
        assert!(make_analytic_gaussian(0.0, -1.0, sched()).is_err());
        let g = make_analytic_gaussian(0.0, 1.0, sched()).unwrap();
        assert!(g.with_shared_sigma(-0.5).is_err());
    }

    #[test]
    fn shared_component_without_variance_is_isotropic() {
        let s = sched();
        let a = make_analytic_gaussian(0.2, 0.5, s.clone()).unwrap();
        let b = make_analytic_gaussian(0.2, 0.5, s)
            .unwrap()
            .with_shared_sigma(0.0)
            .unwrap();
        let z = Latent::from_shape_fn((3, 3, 2), |(y, x, c)| (y + 2 * x + c) as f64 * 0.1);
        assert_eq!(a.noise_at(&z, 0.4).unwrap(), b.noise_at(&z, 0.4).unwrap());
    }

    #[test]
    fn beats_constant_predictors() {
        // MSE against the true noise, 1e4 samples, across noise levels.
        let s = sched();
        let (mu, sigma) = (0.3, 0.8);
        let g = make_analytic_gaussian(mu, sigma, s.clone()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut mse_opt = 0.0;
        let mut mse_zero = 0.0;
        let mut eps_all = Vec::with_capacity(n);
        let mut preds = Vec::with_capacity(n);
        for i in 0..n {
            let t = 1 + (i * 997) % 1000;
            let x: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let z0 = Latent::from_elem((1, 1, 1), mu + sigma * x);
            let eps = Latent::from_elem((1, 1, 1), e);
            let zt = add_noise(&z0, &eps, t, &s).unwrap();
            let p = g.noise_at(&zt, s.alpha_bar(t)).unwrap()[[0, 0, 0]];
            mse_opt += (p - e).powi(2);
            mse_zero += e * e;
            eps_all.push(e);
            preds.push(p);
        }
        let mean_e = eps_all.iter().sum::<f64>() / n as f64;
        let mse_const: f64 = eps_all.iter().map(|e| (e - mean_e).powi(2)).sum();
        assert!(mse_opt < mse_const, "{mse_opt} vs {mse_const}");
        assert!(mse_opt < mse_zero);
    }
}
