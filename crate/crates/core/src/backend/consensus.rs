use super::gaussian::{noise_from_clean, AnalyticGaussian};
use super::{BackendDescriptor, DenoiserBackend};
use crate::diffusion::{Conditioning, Latent, LatentMask, Tiling};
use crate::error::{Error, Result};

/// Grid-aware toy prior whose implied clean estimate pulls the unknown
/// regions of the tiles in one input toward each other.
///
/// Known positions follow the wrapped analytic Gaussian. At an unknown
/// position `p` of a tile the clean estimate becomes
/// `local + strength * (m - local)`, where `local` is the Gaussian posterior
/// mean and `m` averages `local` at the same in-tile position `p` over the
/// tiles where `p` is unknown. Identical tiles therefore reproduce the
/// Gaussian exactly, and `strength = 1` makes the tiles agree.
#[derive(Debug, Clone)]
pub struct ConsensusBackend {
    prior: AnalyticGaussian,
    strength: f64,
}

pub fn make_consensus_backend(prior: AnalyticGaussian, strength: f64) -> Result<ConsensusBackend> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::invalid(format!(
            "consensus strength must lie in (0, 1], got {strength}"
        )));
    }
    Ok(ConsensusBackend { prior, strength })
}

/// Tile origins and size for a tiling of an `h x w` input.
fn tiles(shape: &[usize], tiling: Tiling) -> Result<(Vec<(usize, usize)>, usize, usize)> {
    let (h, w) = (shape[0], shape[1]);
    match tiling {
        Tiling::Single => Ok((vec![(0, 0)], h, w)),
        Tiling::Grid2x2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("grid latent must have even size, got {h}x{w}")));
            }
            let (qh, qw) = (h / 2, w / 2);
            Ok((vec![(0, 0), (0, qw), (qh, 0), (qh, qw)], qh, qw))
        }
    }
}

impl ConsensusBackend {
    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn prior(&self) -> &AnalyticGaussian {
        &self.prior
    }

    /// Clean estimate at signal level `alpha_bar` for the given mask layout.
    pub fn implied_clean_at(&self, z: &Latent, alpha_bar: f64, mask: &LatentMask, tiling: Tiling) -> Result<Latent> {
        crate::diffusion::check_mask(z, mask)?;
        let mut est = self.prior.posterior_mean_at(z, alpha_bar)?;
        let channels = z.shape()[2];
        let (origins, th, tw) = tiles(z.shape(), tiling)?;
        if origins.len() < 2 {
            return Ok(est);
        }
        let s = self.strength;
        let mut shared = vec![0.0; channels];
        let mut members = Vec::with_capacity(origins.len());
        for y in 0..th {
            for x in 0..tw {
                members.clear();
                members.extend(
                    origins
                        .iter()
                        .map(|&(y0, x0)| (y0 + y, x0 + x))
                        .filter(|&(gy, gx)| mask[[gy, gx]] < 0.5),
                );
                if members.len() < 2 {
                    continue;
                }
                let k = members.len() as f64;
                for (c, m) in shared.iter_mut().enumerate() {
                    // Offsets from the first member keep identical tiles exact.
                    let first = est[[members[0].0, members[0].1, c]];
                    *m = first + members.iter().map(|&(gy, gx)| est[[gy, gx, c]] - first).sum::<f64>() / k;
                }
                for &(gy, gx) in &members {
                    for (c, m) in shared.iter().enumerate() {
                        let v = &mut est[[gy, gx, c]];
                        if *m != *v {
                            *v += s * (m - *v);
                        }
                    }
                }
            }
        }
        Ok(est)
    }

    pub fn implied_clean(&self, z: &Latent, t: usize, cond: &Conditioning) -> Result<Latent> {
        let sched = self.prior.schedule();
        sched.check_step(t)?;
        self.implied_clean_at(z, sched.alpha_bar(t), &cond.cond_mask, cond.tiling)
    }
}

impl DenoiserBackend for ConsensusBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "consensus".into(),
            grid_aware: true,
            ..self.prior.descriptor()
        }
    }

    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &Conditioning) -> Result<Latent> {
        let sched = self.prior.schedule();
        sched.check_step(t)?;
        let ab = sched.alpha_bar(t);
        if ab >= 1.0 {
            return Ok(Latent::zeros(z_t.raw_dim()));
        }
        let z0 = self.implied_clean_at(z_t, ab, &cond.cond_mask, cond.tiling)?;
        Ok(noise_from_clean(z_t, &z0, ab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::make_analytic_gaussian;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use std::sync::Arc;

    fn prior() -> AnalyticGaussian {
        let s = Arc::new(make_schedule(ScheduleKind::Linear, 1000).unwrap());
        make_analytic_gaussian(0.0, 1.0, s).unwrap()
    }

    /// 4x4 grid, one channel, quadrant q filled with `vals[q]`, all unknown.
    fn quadrant_grid(vals: [f64; 4]) -> Latent {
        Latent::from_shape_fn((4, 4, 1), |(y, x, _)| vals[(y / 2) * 2 + x / 2])
    }

    fn quadrant_means(z: &Latent) -> [f64; 4] {
        let mut out = [0.0; 4];
        for ((y, x, _), v) in z.indexed_iter() {
            out[(y / 2) * 2 + x / 2] += v / 4.0;
        }
        out
    }

    #[test]
    fn strength_range() {
        assert!(make_consensus_backend(prior(), 0.0).is_err());
        assert!(make_consensus_backend(prior(), 1.1).is_err());
        assert!(make_consensus_backend(prior(), 1.0).is_ok());
    }

    #[test]
    fn pulls_toward_grid_mean() {
        let b = make_consensus_backend(prior(), 0.5).unwrap();
        let z = quadrant_grid([0.0, 0.0, 4.0, 4.0]);
        let mask = LatentMask::zeros((4, 4));
        let ab = 0.6;
        let local = quadrant_means(&b.prior().posterior_mean_at(&z, ab).unwrap());
        let pulled = quadrant_means(&b.implied_clean_at(&z, ab, &mask, Tiling::Grid2x2).unwrap());
        let grid_mean = local.iter().sum::<f64>() / 4.0;
        for q in 0..4 {
            // Each quadrant moves strictly toward the shared mean.
            assert!((pulled[q] - grid_mean).abs() < (local[q] - grid_mean).abs());
            assert!((pulled[q] - local[q]) * (grid_mean - local[q]) > 0.0);
        }
        // Raw quadrant means (0,0,4,4) have grid mean 2; drift signs follow.
        assert!(pulled[0] > local[0] && pulled[2] < local[2]);
    }

    #[test]
    fn full_strength_equalizes_unknown_regions() {
        let b = make_consensus_backend(prior(), 1.0).unwrap();
        let z = Latent::from_shape_fn((4, 4, 2), |(y, x, c)| (y * 4 + x) as f64 * 0.3 - c as f64);
        let mask = LatentMask::zeros((4, 4));
        let est = b.implied_clean_at(&z, 0.4, &mask, Tiling::Grid2x2).unwrap();
        for (y, x, c) in quadrant_positions() {
            let first = est[[y, x, c]];
            for (dy, dx) in [(0, 2), (2, 0), (2, 2)] {
                assert!((est[[y + dy, x + dx, c]] - first).abs() < 1e-12);
            }
        }
    }

    fn quadrant_positions() -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..2 {
                    v.push((y, x, c));
                }
            }
        }
        v
    }

    #[test]
    fn single_tile_matches_gaussian() {
        let b = make_consensus_backend(prior(), 0.9).unwrap();
        let z = Latent::from_shape_fn((3, 3, 1), |(y, x, _)| (y as f64) - 0.5 * x as f64);
        let mask = LatentMask::zeros((3, 3));
        let est = b.implied_clean_at(&z, 0.3, &mask, Tiling::Single).unwrap();
        assert_eq!(est, b.prior().posterior_mean_at(&z, 0.3).unwrap());
    }

    #[test]
    fn identical_quadrants_match_gaussian() {
        let b = make_consensus_backend(prior(), 0.7).unwrap();
        let tile = [[0.3, -1.2], [2.0, 0.1]];
        let z = Latent::from_shape_fn((4, 4, 1), |(y, x, _)| tile[y % 2][x % 2]);
        let mask = LatentMask::from_shape_fn((4, 4), |(y, x)| if (y % 2, x % 2) == (0, 1) { 1.0 } else { 0.0 });
        let mut cond = Conditioning::from_known(&z, &mask).unwrap();
        cond.tiling = Tiling::Grid2x2;
        let t = 350;
        let a = b.predict_noise(&z, t, &cond).unwrap();
        let g = b.prior().predict_noise(&z, t, &cond).unwrap();
        for (x, y) in a.iter().zip(g.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_across_quadrants_decreases_with_strength() {
        let z = quadrant_grid([0.5, -1.0, 2.0, 3.5]);
        let mask = LatentMask::zeros((4, 4));
        let var = |s: f64| {
            let b = make_consensus_backend(prior(), s).unwrap();
            let m = quadrant_means(&b.implied_clean_at(&z, 0.5, &mask, Tiling::Grid2x2).unwrap());
            let mean = m.iter().sum::<f64>() / 4.0;
            m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0
        };
        let strengths = [0.05, 0.2, 0.4, 0.6, 0.8, 1.0];
        let vars: Vec<f64> = strengths.iter().map(|&s| var(s)).collect();
        assert!(vars.windows(2).all(|w| w[1] < w[0]), "{vars:?}");
        assert!(vars[5] < 1e-20);
    }

    #[test]
    fn known_positions_follow_gaussian() {
        let b = make_consensus_backend(prior(), 1.0).unwrap();
        let z = quadrant_grid([0.0, 1.0, 2.0, 3.0]);
        let mask = LatentMask::from_shape_fn((4, 4), |(y, _)| if y == 0 { 1.0 } else { 0.0 });
        let est = b.implied_clean_at(&z, 0.5, &mask, Tiling::Grid2x2).unwrap();
        let local = b.prior().posterior_mean_at(&z, 0.5).unwrap();
        for x in 0..4 {
            assert_eq!(est[[0, x, 0]], local[[0, x, 0]]);
        }
    }
}
