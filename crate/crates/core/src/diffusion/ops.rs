use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

/// Latent tensor laid out as (height, width, channels).
pub type Latent = Array3<f64>;

/// Latent-resolution mask, 1 = known, 0 = to be inpainted.
pub type LatentMask = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub s_image: f64,
    pub s_text: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self {
            s_image: 1.0,
            s_text: 0.0,
        }
    }
}

impl GuidanceScales {
    pub fn new(s_image: f64, s_text: f64) -> Result<Self> {
        let scales = Self { s_image, s_text };
        scales.validate()?;
        Ok(scales)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s_image >= 0.0 && self.s_text >= 0.0) {
            return Err(Error::invalid(format!(
                "guidance scales must be non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// How the latent handed to a backend is arranged spatially.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tiling {
    #[default]
    Single,
    /// Four views tiled as a 2x2 grid.
    Grid2x2,
}

/// Conditioning for one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// Masked input; unknown region zeroed.
    pub cond_image: Latent,
    pub cond_mask: LatentMask,
    pub text: Option<String>,
    pub drop_image: bool,
    pub drop_text: bool,
    pub tiling: Tiling,
}

impl Conditioning {
    /// Builds the conditioning for a view from its known content, zeroing
    /// everything outside the known mask.
    pub fn from_known(z0_known: &Latent, mask: &LatentMask) -> Result<Self> {
        check_mask(z0_known, mask)?;
        let mut cond_image = z0_known.clone();
        for ((y, x, _), v) in cond_image.indexed_iter_mut() {
            if mask[[y, x]] < 0.5 {
                *v = 0.0;
            }
        }
        Ok(Self {
            cond_image,
            cond_mask: mask.clone(),
            text: None,
            drop_image: false,
            drop_text: false,
            tiling: Tiling::Single,
        })
    }

    pub fn with_text(mut self, text: Option<String>) -> Self {
        self.text = text;
        self
    }

    pub fn with_tiling(mut self, tiling: Tiling) -> Self {
        self.tiling = tiling;
        self
    }

    /// The fully masked variant: zero image, every position unknown.
    pub fn without_image(&self) -> Self {
        Self {
            cond_image: Latent::zeros(self.cond_image.raw_dim()),
            cond_mask: LatentMask::zeros(self.cond_mask.raw_dim()),
            drop_image: true,
            ..self.clone()
        }
    }

    pub fn without_text(&self) -> Self {
        Self {
            text: None,
            drop_text: true,
            ..self.clone()
        }
    }

    /// Text a backend should see, honoring `drop_text`.
    pub fn effective_text(&self) -> Option<&str> {
        if self.drop_text {
            None
        } else {
            self.text.as_deref()
        }
    }
}

fn check_same(a: &Latent, b: &Latent, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn check_mask(z: &Latent, mask: &LatentMask) -> Result<()> {
    if z.shape()[..2] != *mask.shape() {
        return Err(Error::shape(format!(
            "mask {:?} does not match latent {:?}",
            mask.shape(),
            z.shape()
        )));
    }
    Ok(())
}

/// Forward process: `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`.
pub fn add_noise(z0: &Latent, eps: &Latent, t: usize, sched: &NoiseSchedule) -> Result<Latent> {
    check_same(z0, eps, "add_noise")?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(z0).and(eps).map_collect(|&z, &e| a * z + b * e))
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(z_t: &Latent, eps_hat: &Latent, t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Latent> {
    check_same(z_t, eps_hat, "ddim_step")?;
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "ddim_step requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(Zip::from(z_t).and(eps_hat).map_collect(|&z, &e| {
        let z0_hat = (z - sb * e) / sa;
        pa * z0_hat + pb * e
    }))
}

/// Three-branch classifier-free guidance:
/// `e(cI,0) + s_image * (e(cI,cT) - e(cI,0)) + s_text * (e(cI,0) - e(0,0))`.
pub fn cfg_combine(
    eps_img_only: &Latent,
    eps_img_text: &Latent,
    eps_uncond: &Latent,
    scales: &GuidanceScales,
) -> Result<Latent> {
    check_same(eps_img_only, eps_img_text, "cfg_combine")?;
    check_same(eps_img_only, eps_uncond, "cfg_combine")?;
    let (si, st) = (scales.s_image, scales.s_text);
    Ok(Zip::from(eps_img_only)
        .and(eps_img_text)
        .and(eps_uncond)
        // Expanded so that scales (0, 0) and (1, 0) return a branch exactly.
        .map_collect(|&io, &it, &un| (1.0 - si) * io + si * it + st * (io - un)))
}

/// Replaces the known region of `z_t` with the known latents noised to level
/// `t`; the unknown region passes through.
pub fn enforce_known(
    z_t: &Latent,
    z0_known: &Latent,
    mask: &LatentMask,
    eps: &Latent,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    check_same(z_t, z0_known, "enforce_known")?;
    check_mask(z_t, mask)?;
    let noised = add_noise(z0_known, eps, t, sched)?;
    let mut out = z_t.clone();
    Zip::indexed(&mut out).and(&noised).for_each(|(y, x, _), o, &n| {
        let m = mask[[y, x]];
        if m == 1.0 {
            *o = n;
        } else if m != 0.0 {
            *o = m * n + (1.0 - m) * *o;
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{make_schedule, ScheduleKind};
    use ndarray::arr3;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn sched() -> NoiseSchedule {
        make_schedule(ScheduleKind::Linear, 1000).unwrap()
    }

    fn scalar(v: f64) -> Latent {
        arr3(&[[[v]]])
    }

    fn randn(shape: (usize, usize, usize), seed: u64) -> Latent {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Latent::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn add_noise_endpoints() {
        let s = sched();
        let z0 = randn((4, 4, 3), 1);
        let eps = randn((4, 4, 3), 2);
        assert_eq!(add_noise(&z0, &eps, 0, &s).unwrap(), z0);
        let zero = Latent::zeros((4, 4, 3));
        let noised = add_noise(&zero, &eps, 500, &s).unwrap();
        let b = (1.0 - s.alpha_bar(500)).sqrt();
        assert_eq!(noised, eps.mapv(|e| b * e));
    }

    #[test]
    fn add_noise_rejects_mismatch() {
        let s = sched();
        assert!(add_noise(&Latent::zeros((2, 2, 1)), &Latent::zeros((2, 3, 1)), 1, &s).is_err());
        assert!(add_noise(&scalar(0.0), &scalar(0.0), 1001, &s).is_err());
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = sched();
        let t = 300;
        let n = 100_000;
        let eps = randn((n, 1, 1), 11);
        let z0 = Latent::from_elem((n, 1, 1), 0.7);
        let z = add_noise(&z0, &eps, t, &s).unwrap();
        let mean = z.mean().unwrap();
        let var = z.mapv(|v| (v - mean).powi(2)).sum() / (n - 1) as f64;
        let expected = 1.0 - s.alpha_bar(t);
        // Standard error of the sample variance of a Gaussian: var * sqrt(2/(n-1)).
        let se = expected * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - expected).abs() < 3.0 * se, "{var} vs {expected}");
    }

    #[test]
    fn ddim_inverts_exact_noise() {
        let s = sched();
        for &t in &[1usize, 10, 250, 500, 999, 1000] {
            let z0 = randn((8, 8, 4), t as u64);
            let eps = randn((8, 8, 4), 1000 + t as u64);
            let zt = add_noise(&z0, &eps, t, &s).unwrap();
            let back = ddim_step(&zt, &eps, t, 0, &s).unwrap();
            let err = (&back - &z0).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-6, "t={t} err={err}");
        }
    }

    #[test]
    fn ddim_zero_prediction_scales() {
        let s = sched();
        let z = randn((3, 3, 2), 5);
        let out = ddim_step(&z, &Latent::zeros((3, 3, 2)), 700, 300, &s).unwrap();
        let ratio = (s.alpha_bar(300) / s.alpha_bar(700)).sqrt();
        for (o, i) in out.iter().zip(z.iter()) {
            assert!((o - ratio * i).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_non_decreasing_steps() {
        let s = sched();
        assert!(ddim_step(&scalar(1.0), &scalar(0.0), 10, 10, &s).is_err());
        assert!(ddim_step(&scalar(1.0), &scalar(0.0), 10, 20, &s).is_err());
    }

    #[test]
    fn cfg_identities() {
        let a = randn((2, 2, 2), 1);
        let b = randn((2, 2, 2), 2);
        let c = randn((2, 2, 2), 3);
        assert_eq!(
            cfg_combine(&a, &b, &c, &GuidanceScales::new(0.0, 0.0).unwrap()).unwrap(),
            a
        );
        assert_eq!(
            cfg_combine(&a, &b, &c, &GuidanceScales::new(1.0, 0.0).unwrap()).unwrap(),
            b
        );
    }

    #[test]
    fn cfg_hand_evaluated() {
        // 1 + 2 * (2 - 1) + 3 * (1 - 0) = 6
        let out = cfg_combine(
            &scalar(1.0),
            &scalar(2.0),
            &scalar(0.0),
            &GuidanceScales::new(2.0, 3.0).unwrap(),
        )
        .unwrap();
        assert_eq!(out[[0, 0, 0]], 6.0);
    }

    #[test]
    fn negative_scales_rejected() {
        assert!(GuidanceScales::new(-0.1, 0.0).is_err());
        assert!(GuidanceScales::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn enforce_known_cases() {
        let s = sched();
        let z = randn((2, 2, 1), 1);
        let known = randn((2, 2, 1), 2);
        let eps = randn((2, 2, 1), 3);
        let ones = LatentMask::ones((2, 2));
        let zeros = LatentMask::zeros((2, 2));
        assert_eq!(enforce_known(&z, &known, &ones, &eps, 0, &s).unwrap(), known);
        assert_eq!(enforce_known(&z, &known, &zeros, &eps, 700, &s).unwrap(), z);

        // Half-known pair at the no-noise endpoint.
        let z = Latent::from_shape_vec((1, 2, 1), vec![5.0, 5.0]).unwrap();
        let known = Latent::from_shape_vec((1, 2, 1), vec![2.0, -9.0]).unwrap();
        let mask = LatentMask::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let eps = Latent::zeros((1, 2, 1));
        let out = enforce_known(&z, &known, &mask, &eps, 0, &s).unwrap();
        assert_eq!(out.iter().copied().collect::<Vec<_>>(), vec![2.0, 5.0]);
    }

    #[test]
    fn enforce_known_rejects_bad_mask() {
        let s = sched();
        let z = Latent::zeros((2, 2, 1));
        assert!(enforce_known(&z, &z, &LatentMask::zeros((3, 2)), &z, 0, &s).is_err());
    }

    #[test]
    fn conditioning_zeroes_unknown() {
        let z = Latent::from_elem((2, 2, 2), 3.0);
        let mask = LatentMask::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = Conditioning::from_known(&z, &mask).unwrap();
        assert_eq!(c.cond_image[[0, 0, 1]], 3.0);
        assert_eq!(c.cond_image[[0, 1, 0]], 0.0);
        let dropped = c.without_image();
        assert!(dropped.drop_image);
        assert!(dropped.cond_mask.iter().all(|&m| m == 0.0));
        assert!(dropped.cond_image.iter().all(|&v| v == 0.0));
    }
}
