//! Dense voxel radiance field: trilinear lookup, volume rendering with
//! analytic gradients, and a momentum optimizer.

mod camera;
mod checkpoint;
mod optim;
mod render;

pub use camera::{Camera, ROTATION_TOLERANCE};
pub use checkpoint::{load_field, save_field, CHECKPOINT_MAGIC};
pub use optim::{DepthLoss, FieldOptimizer, LossWeights, OptimizerConfig, StepStats};
pub use render::{
    render_rays, render_view, RayBatch, RayOutput, RayTape, RenderOptions, RenderedView, DEPTH_WEIGHT_EPS,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] - self.min[a] > 0.0) || !self.min[a].is_finite() || !self.max[a].is_finite() {
                return Err(Error::invalid(format!(
                    "bounds need positive finite extent on every axis: {self:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn translated(&self, by: [f64; 3]) -> Self {
        Self {
            min: [0, 1, 2].map(|a| self.min[a] + by[a]),
            max: [0, 1, 2].map(|a| self.max[a] + by[a]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    #[default]
    White,
    Black,
}

impl Background {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Background::White => [1.0; 3],
            Background::Black => [0.0; 3],
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Inverse of [`sigmoid`] on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of parameters stored per voxel: raw density then raw RGB.
pub const PARAMS_PER_VOXEL: usize = 4;

/// Voxel grid of pre-activation density and color. Density is
/// `softplus(raw)`, color `sigmoid(raw)`, both interpolated trilinearly in
/// raw space between voxel centers. Color does not depend on view direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    resolution: [usize; 3],
    /// Per voxel `[density, r, g, b]`, voxel `(x, y, z)` at
    /// `x + X * (y + Y * z)`.
    params: Vec<f64>,
    bounds: Aabb,
    background: Background,
}

/// Trilinear stencil of a point: 8 voxel indices and weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub voxels: [usize; 8],
    pub weights: [f64; 8],
}

impl RadianceField {
    /// Field with every voxel set to the given raw values.
    pub fn constant(
        resolution: [usize; 3],
        bounds: Aabb,
        background: Background,
        density_raw: f64,
        color_raw: [f64; 3],
    ) -> Result<Self> {
        if resolution.contains(&0) {
            return Err(Error::invalid(format!(
                "resolution must be positive, got {resolution:?}"
            )));
        }
        bounds.validate()?;
        let n = resolution.iter().product::<usize>();
        let mut params = Vec::with_capacity(n * PARAMS_PER_VOXEL);
        for _ in 0..n {
            params.extend_from_slice(&[density_raw, color_raw[0], color_raw[1], color_raw[2]]);
        }
        Ok(Self {
            resolution,
            params,
            bounds,
            background,
        })
    }

    /// Field from interleaved raw parameters.
    pub fn from_params(resolution: [usize; 3], bounds: Aabb, background: Background, params: Vec<f64>) -> Result<Self> {
        let mut f = Self::constant(resolution, bounds, background, 0.0, [0.0; 3])?;
        if params.len() != f.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                f.params.len(),
                params.len()
            )));
        }
        f.params = params;
        Ok(f)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn background(&self) -> Background {
        self.background
    }

    pub fn set_background(&mut self, background: Background) {
        self.background = background;
    }

    pub fn num_voxels(&self) -> usize {
        self.params.len() / PARAMS_PER_VOXEL
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    pub fn cell_size(&self) -> [f64; 3] {
        let e = self.bounds.extent();
        [0, 1, 2].map(|a| e[a] / self.resolution[a] as f64)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let c = self.cell_size();
        let i = [x, y, z];
        [0, 1, 2].map(|a| self.bounds.min[a] + (i[a] as f64 + 0.5) * c[a])
    }

    pub fn density_raw(&self, voxel: usize) -> f64 {
        self.params[voxel * PARAMS_PER_VOXEL]
    }

    pub fn color_raw(&self, voxel: usize) -> [f64; 3] {
        let b = voxel * PARAMS_PER_VOXEL;
        [self.params[b + 1], self.params[b + 2], self.params[b + 3]]
    }

    pub fn set_voxel(&mut self, voxel: usize, density_raw: f64, color_raw: [f64; 3]) {
        let b = voxel * PARAMS_PER_VOXEL;
        self.params[b..b + 4].copy_from_slice(&[density_raw, color_raw[0], color_raw[1], color_raw[2]]);
    }

    /// Interpolation stencil, or `None` outside the bounds. Coordinates
    /// beyond the outermost voxel centers clamp to them.
    pub fn stencil(&self, p: [f64; 3]) -> Option<Stencil> {
        if !self.bounds.contains(p) {
            return None;
        }
        let cell = self.cell_size();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let r = self.resolution[a];
            let u = ((p[a] - self.bounds.min[a]) / cell[a] - 0.5).clamp(0.0, (r - 1) as f64);
            let i0 = (u.floor() as usize).min(r.saturating_sub(2));
            lo[a] = i0;
            hi[a] = (i0 + 1).min(r - 1);
            frac[a] = if hi[a] == lo[a] { 0.0 } else { u - i0 as f64 };
        }
        let mut voxels = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for k in 0..8 {
            let pick = |a: usize| (k >> a) & 1 == 1;
            let ix = if pick(0) { hi[0] } else { lo[0] };
            let iy = if pick(1) { hi[1] } else { lo[1] };
            let iz = if pick(2) { hi[2] } else { lo[2] };
            voxels[k] = self.voxel_index(ix, iy, iz);
            weights[k] = (0..3).map(|a| if pick(a) { frac[a] } else { 1.0 - frac[a] }).product();
        }
        Some(Stencil { voxels, weights })
    }

    /// Interpolated raw `[density, r, g, b]` for a stencil.
    pub fn raw_at(&self, s: &Stencil) -> [f64; 4] {
        let mut out = [0.0; 4];
        for k in 0..8 {
            let b = s.voxels[k] * PARAMS_PER_VOXEL;
            let w = s.weights[k];
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.params[b + c];
            }
        }
        out
    }

    /// Activated density and color at one point.
    pub fn query_point(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        match self.stencil(p) {
            None => (0.0, self.background.rgb()),
            Some(s) => {
                let raw = self.raw_at(&s);
                (softplus(raw[0]), [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])])
            }
        }
    }

    /// Same field with its bounds shifted.
    pub fn translated(&self, by: [f64; 3]) -> Self {
        Self {
            bounds: self.bounds.translated(by),
            ..self.clone()
        }
    }
}

/// Density and color at each point.
pub fn field_query(field: &RadianceField, points: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>) {
    points.iter().map(|&p| field.query_point(p)).unzip()
}
