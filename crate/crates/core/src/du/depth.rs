use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DepthMap, PixelMask};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Where prior depth maps come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSource {
    SyntheticGt,
    External,
    None,
}

/// Per-view depth estimates used only for their ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPrior {
    pub source: DepthSource,
    pub maps: Vec<DepthMap>,
    pub valid: Vec<PixelMask>,
}

impl DepthPrior {
    pub fn none() -> Self {
        Self {
            source: DepthSource::None,
            maps: Vec::new(),
            valid: Vec::new(),
        }
    }

    /// Ground-truth depth with multiplicative noise `1 + relative_noise * n`,
    /// `n` standard normal.
    pub fn from_ground_truth(gt: &[DepthMap], relative_noise: f64, rng: &mut Rng) -> Result<Self> {
        if !(relative_noise >= 0.0 && relative_noise.is_finite()) {
            return Err(Error::invalid("relative depth noise must be >= 0"));
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut maps = Vec::with_capacity(gt.len());
        let mut valid = Vec::with_capacity(gt.len());
        for d in gt {
            let mut m = d.clone();
            let mut v = PixelMask::from_elem(d.dim(), false);
            for ((idx, out), ok) in m.indexed_iter_mut().zip(v.iter_mut()) {
                let x = d[idx];
                if x.is_finite() && x > 0.0 {
                    let f = (1.0 + relative_noise * normal.sample(rng)).max(1e-3);
                    *out = (x as f64 * f) as f32;
                    *ok = true;
                }
            }
            maps.push(m);
            valid.push(v);
        }
        Self::external(maps, valid).map(|p| Self {
            source: DepthSource::SyntheticGt,
            ..p
        })
    }

    pub fn external(maps: Vec<DepthMap>, valid: Vec<PixelMask>) -> Result<Self> {
        let p = Self {
            source: DepthSource::External,
            maps,
            valid,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps.len() != self.valid.len() {
            return Err(Error::invalid("depth prior needs one validity mask per map"));
        }
        for (i, (m, v)) in self.maps.iter().zip(&self.valid).enumerate() {
            if m.dim() != v.dim() {
                return Err(Error::shape(format!("depth prior {i}: mask does not match map")));
            }
            if m.iter().zip(v).any(|(d, ok)| *ok && !(d.is_finite() && *d > 0.0)) {
                return Err(Error::invalid(format!(
                    "depth prior {i}: valid depths must be finite and positive"
                )));
            }
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.source != DepthSource::None
    }

    /// Prior depth at a pixel, if valid.
    pub fn at(&self, view: usize, row: usize, col: usize) -> Option<f64> {
        let v = self.valid.get(view)?;
        v[[row, col]].then(|| self.maps[view][[row, col]] as f64)
    }
}

/// Draws up to `count` index pairs `(near, far)` whose prior depths are
/// ordered `prior[near] < prior[far]`. Pairs closer than `tie_threshold`
/// relative to the larger depth are dropped, so fewer may be returned.
pub fn sample_rank_pairs(
    prior: &[f64],
    count: usize,
    tie_threshold: f64,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    let k = prior.len();
    if k < 2 {
        return Err(Error::invalid(format!(
            "depth ranking needs at least 2 samples, got {k}"
        )));
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.gen_range(0..k);
        let mut j = rng.gen_range(0..k - 1);
        if j >= i {
            j += 1;
        }
        let (pi, pj) = (prior[i], prior[j]);
        if (pi - pj).abs() <= tie_threshold * pi.abs().max(pj.abs()) {
            continue;
        }
        pairs.push(if pi < pj { (i, j) } else { (j, i) });
    }
    Ok(pairs)
}

/// Mean hinge `max(0, d[near] - d[far] + margin)` over pairs, and its
/// gradient with respect to `rendered`. Zero for an empty pair list.
pub fn rank_hinge(rendered: &[f64], pairs: &[(usize, usize)], margin: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; rendered.len()];
    if pairs.is_empty() {
        return (0.0, grad);
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    for &(near, far) in pairs {
        let v = rendered[near] - rendered[far] + margin;
        if v > 0.0 {
            loss += v * inv;
            grad[near] += inv;
            grad[far] -= inv;
        }
    }
    (loss, grad)
}

/// Ranking loss of `rendered` against `prior` over `pair_count` random pairs.
pub fn depth_rank_loss(
    rendered: &[f64],
    prior: &[f64],
    pair_count: usize,
    margin: f64,
    tie_threshold: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if rendered.len() != prior.len() {
        return Err(Error::shape(format!(
            "{} rendered depths vs {} prior depths",
            rendered.len(),
            prior.len()
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::invalid("ranking margin must be > 0"));
    }
    let pairs = sample_rank_pairs(prior, pair_count, tie_threshold, rng)?;
    Ok(rank_hinge(rendered, &pairs, margin).0)
}
