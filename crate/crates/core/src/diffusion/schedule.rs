use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;
pub const DEFAULT_TRAIN_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Betas linearly spaced between `beta_start` and `beta_end`.
    Linear,
    /// Squared-cosine alpha-bar with betas capped at 0.999.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            num_train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

/// Cumulative signal-retention table of the forward process.
///
/// `alpha_bar[0] = 1` (clean data) and the table has `num_train_steps + 1`
/// entries, strictly decreasing and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let steps = config.num_train_steps;
        if steps < 2 {
            return Err(Error::invalid(format!("num_train_steps must be >= 2, got {steps}")));
        }
        let betas = match config.kind {
            ScheduleKind::Linear => {
                let (b0, b1) = (config.beta_start, config.beta_end);
                if !(b0 > 0.0 && b1 > 0.0 && b0 < 1.0 && b1 < 1.0) {
                    return Err(Error::invalid(format!("betas must lie in (0, 1), got {b0}..{b1}")));
                }
                (0..steps)
                    .map(|i| b0 + (b1 - b0) * i as f64 / (steps - 1) as f64)
                    .collect::<Vec<_>>()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t / steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (0..steps)
                    .map(|i| (1.0 - f((i + 1) as f64) / f(i as f64)).clamp(1e-8, 0.999))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for beta in betas {
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(Self {
            kind: config.kind,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn num_train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Panics if `t > num_train_steps`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t > self.num_train_steps() {
            return Err(Error::invalid(format!(
                "step {t} exceeds schedule length {}",
                self.num_train_steps()
            )));
        }
        Ok(())
    }

    /// Maps a noise level in [0, 1] to the nearest step index.
    pub fn step_for_level(&self, level: f64) -> usize {
        let steps = self.num_train_steps();
        ((level.clamp(0.0, 1.0) * steps as f64).round() as usize).min(steps)
    }
}

/// Builds a schedule with the default beta endpoints.
pub fn make_schedule(kind: ScheduleKind, num_train_steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(&ScheduleConfig {
        kind,
        num_train_steps,
        ..ScheduleConfig::default()
    })
}

/// Evenly spaced DDIM timesteps from `t_start` down to 0, inclusive and
/// strictly decreasing. Always ends at 0; duplicates from rounding are
/// removed, so short ranges can yield fewer than `num_steps` transitions.
pub fn ddim_timesteps(t_start: usize, num_steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..=num_steps)
        .map(|k| {
            let frac = (num_steps - k) as f64 / num_steps as f64;
            (t_start as f64 * frac).round() as usize
        })
        .collect();
    ts.dedup();
    ts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_boundary() {
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bars().len(), 1001);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn minimal_schedule() {
        let s = make_schedule(ScheduleKind::Linear, 2).unwrap();
        assert_eq!(s.alpha_bars().len(), 3);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_short_schedule() {
        assert!(make_schedule(ScheduleKind::Linear, 1).is_err());
        assert!(make_schedule(ScheduleKind::Cosine, 0).is_err());
    }

    #[test]
    fn final_alpha_bar_matches_direct_product() {
        // Independent oracle: accumulate the product in log space.
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        let log_sum: f64 = (0..1000)
            .map(|i| {
                let beta = DEFAULT_BETA_START + (DEFAULT_BETA_END - DEFAULT_BETA_START) * i as f64 / 999.0;
                (1.0 - beta).ln()
            })
            .sum();
        let expected = log_sum.exp();
        assert!((s.alpha_bar(1000) - expected).abs() < 1e-12 * expected.max(1e-300) + 1e-15);
        // Frozen value of the product for the default linear schedule.
        assert!((s.alpha_bar(1000) - 1.5790e-3).abs() < 1e-6, "{}", s.alpha_bar(1000));
    }

    #[test]
    fn cosine_schedule_invariants() {
        let s = make_schedule(ScheduleKind::Cosine, 1000).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
    }

    #[test]
    fn unit_norm_coefficients() {
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        for &a in s.alpha_bars() {
            let sum = a.sqrt().powi(2) + (1.0 - a).sqrt().powi(2);
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn timesteps_keep_step_count() {
        let ts = ddim_timesteps(1000, 20);
        assert_eq!(ts.len(), 21);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 0);
        let ts = ddim_timesteps(400, 20);
        assert_eq!(ts.len(), 21);
        assert_eq!(ts[1], 380);
        let ts = ddim_timesteps(5, 20);
        assert_eq!(ts, vec![5, 4, 3, 2, 1, 0]);
        assert_eq!(ddim_timesteps(0, 20), vec![0]);
    }
}
