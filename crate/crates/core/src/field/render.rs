use ndarray::{Array2, Array3};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::Camera;
use super::{sigmoid, softplus, RadianceField, Stencil, PARAMS_PER_VOXEL};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Guard on the accumulated weight when normalizing depth.
pub const DEPTH_WEIGHT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    /// Marching stops once transmittance drops below this; 0 disables.
    pub transmittance_cutoff: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples_per_ray: 96,
            near: 0.05,
            far: 6.0,
            transmittance_cutoff: 1e-4,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::invalid(format!(
                "samples_per_ray must be >= 2, got {}",
                self.samples_per_ray
            )));
        }
        if !(self.near >= 0.0 && self.far > self.near) {
            return Err(Error::invalid(format!(
                "need 0 <= near < far, got {}..{}",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<[f64; 3]>,
    /// Unit directions.
    pub directions: Vec<[f64; 3]>,
    pub near: f64,
    pub far: f64,
    /// Which dataset pixel each ray belongs to (caller-defined encoding).
    pub pixel_ids: Vec<usize>,
}

impl RayBatch {
    pub fn new(
        origins: Vec<[f64; 3]>,
        directions: Vec<[f64; 3]>,
        near: f64,
        far: f64,
        pixel_ids: Vec<usize>,
    ) -> Result<Self> {
        let b = Self {
            origins,
            directions,
            near,
            far,
            pixel_ids,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.origins.len() != self.directions.len() || self.origins.len() != self.pixel_ids.len() {
            return Err(Error::shape(format!(
                "ray batch has {} origins, {} directions, {} pixel ids",
                self.origins.len(),
                self.directions.len(),
                self.pixel_ids.len()
            )));
        }
        if !(self.near >= 0.0 && self.far > self.near) {
            return Err(Error::invalid(format!(
                "need 0 <= near < far, got {}..{}",
                self.near, self.far
            )));
        }
        for (i, d) in self.directions.iter().enumerate() {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("ray {i} direction has norm {n}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayOutput {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

#[derive(Debug, Clone, Copy)]
struct SampleRec {
    t: f64,
    /// Transmittance before this sample.
    trans: f64,
    weight: f64,
    raw: [f64; 4],
    color: [f64; 3],
    stencil: Option<Stencil>,
}

/// Forward pass of a ray batch, retaining what the backward pass needs.
#[derive(Debug, Clone)]
pub struct RayTape {
    samples: Vec<SampleRec>,
    /// `samples[starts[k]..starts[k + 1]]` belong to ray `k`.
    starts: Vec<usize>,
    trans_end: Vec<f64>,
    delta: f64,
    background: [f64; 3],
    pub outputs: Vec<RayOutput>,
}

fn march(
    field: &RadianceField,
    origin: [f64; 3],
    dir: [f64; 3],
    near: f64,
    delta: f64,
    offsets: &[f64],
    cutoff: f64,
    out: &mut Vec<SampleRec>,
) -> (RayOutput, f64) {
    let bg = field.background().rgb();
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut depth_sum = 0.0;
    let mut opacity = 0.0;
    for (i, &u) in offsets.iter().enumerate() {
        let t = near + (i as f64 + u) * delta;
        let p = [0, 1, 2].map(|a| origin[a] + t * dir[a]);
        let stencil = field.stencil(p);
        let (raw, sigma, color) = match &stencil {
            Some(s) => {
                let raw = field.raw_at(s);
                (
                    raw,
                    softplus(raw[0]),
                    [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
                )
            }
            None => ([0.0; 4], 0.0, bg),
        };
        let keep = (-sigma * delta).exp();
        let weight = trans * (1.0 - keep);
        for c in 0..3 {
            rgb[c] += weight * color[c];
        }
        depth_sum += weight * t;
        opacity += weight;
        out.push(SampleRec {
            t,
            trans,
            weight,
            raw,
            color,
            stencil,
        });
        trans *= keep;
        if trans < cutoff {
            break;
        }
    }
    debug_assert!(opacity <= 1.0 + 1e-9, "weights sum to {opacity}");
    for c in 0..3 {
        rgb[c] += trans * bg[c];
    }
    let depth = depth_sum / opacity.max(DEPTH_WEIGHT_EPS);
    (RayOutput { rgb, depth, opacity }, trans)
}

fn offsets_for(n: usize, jitter: &mut Option<&mut Rng>) -> Vec<f64> {
    match jitter {
        Some(rng) => (0..n).map(|_| rng.gen::<f64>()).collect(),
        None => vec![0.5; n],
    }
}

impl RayTape {
    /// Renders every ray. Sample `i` of a ray sits at
    /// `near + (i + u) * (far - near) / samples`, with `u = 0.5` or, when
    /// `jitter` is given, uniform in [0, 1).
    pub fn forward(
        field: &RadianceField,
        rays: &RayBatch,
        opts: &RenderOptions,
        mut jitter: Option<&mut Rng>,
    ) -> Result<Self> {
        if opts.samples_per_ray < 2 {
            return Err(Error::invalid("samples_per_ray must be >= 2"));
        }
        rays.validate()?;
        let delta = (rays.far - rays.near) / opts.samples_per_ray as f64;
        let mut samples = Vec::with_capacity(rays.len() * opts.samples_per_ray);
        let mut starts = Vec::with_capacity(rays.len() + 1);
        let mut trans_end = Vec::with_capacity(rays.len());
        let mut outputs = Vec::with_capacity(rays.len());
        for k in 0..rays.len() {
            starts.push(samples.len());
            let offsets = offsets_for(opts.samples_per_ray, &mut jitter);
            let (out, tr) = march(
                field,
                rays.origins[k],
                rays.directions[k],
                rays.near,
                delta,
                &offsets,
                opts.transmittance_cutoff,
                &mut samples,
            );
            outputs.push(out);
            trans_end.push(tr);
        }
        starts.push(samples.len());
        Ok(Self {
            samples,
            starts,
            trans_end,
            delta,
            background: field.background().rgb(),
            outputs,
        })
    }

    /// Accumulates into `grad` (laid out like the field parameters) the
    /// gradient of a loss whose derivatives with respect to each ray's color
    /// and depth are `d_rgb` and `d_depth`.
    pub fn backward(&self, d_rgb: &[[f64; 3]], d_depth: &[f64], grad: &mut [f64]) -> Result<()> {
        let n = self.outputs.len();
        if d_rgb.len() != n || d_depth.len() != n {
            return Err(Error::shape(format!(
                "{n} rays but {} color and {} depth gradients",
                d_rgb.len(),
                d_depth.len()
            )));
        }
        let delta = self.delta;
        for k in 0..n {
            let out = &self.outputs[k];
            let recs = &self.samples[self.starts[k]..self.starts[k + 1]];
            let t_end = self.trans_end[k];
            let (g_rgb, g_d) = (d_rgb[k], d_depth[k]);
            let w_sum = out.opacity;
            let normalized = w_sum > DEPTH_WEIGHT_EPS;
            let denom = w_sum.max(DEPTH_WEIGHT_EPS);
            let mut suffix_rgb = [0, 1, 2].map(|c| t_end * self.background[c]);
            let mut suffix_t = 0.0;
            for rec in recs.iter().rev() {
                let trans_next = rec.trans - rec.weight;
                if let Some(st) = &rec.stencil {
                    let mut g_sigma = 0.0;
                    for c in 0..3 {
                        g_sigma += g_rgb[c] * delta * (trans_next * rec.color[c] - suffix_rgb[c]);
                    }
                    if g_d != 0.0 {
                        let d_num = delta * (trans_next * rec.t - suffix_t);
                        let d_w = delta * t_end;
                        let d_depth = if normalized {
                            (d_num - out.depth * d_w) / denom
                        } else {
                            d_num / denom
                        };
                        g_sigma += g_d * d_depth;
                    }
                    let g_raw = [
                        g_sigma * sigmoid(rec.raw[0]),
                        g_rgb[0] * rec.weight * rec.color[0] * (1.0 - rec.color[0]),
                        g_rgb[1] * rec.weight * rec.color[1] * (1.0 - rec.color[1]),
                        g_rgb[2] * rec.weight * rec.color[2] * (1.0 - rec.color[2]),
                    ];
                    for j in 0..8 {
                        let w = st.weights[j];
                        if w == 0.0 {
                            continue;
                        }
                        let base = st.voxels[j] * PARAMS_PER_VOXEL;
                        for (c, g) in g_raw.iter().enumerate() {
                            grad[base + c] += w * g;
                        }
                    }
                }
                for c in 0..3 {
                    suffix_rgb[c] += rec.weight * rec.color[c];
                }
                suffix_t += rec.weight * rec.t;
            }
        }
        Ok(())
    }

    /// Adds every voxel any sample interpolated from to `list`, using
    /// `flags` (one per voxel) to skip duplicates.
    pub fn mark_voxels(&self, flags: &mut [bool], list: &mut Vec<usize>) {
        for st in self.samples.iter().filter_map(|r| r.stencil.as_ref()) {
            for &v in &st.voxels {
                if !flags[v] {
                    flags[v] = true;
                    list.push(v);
                }
            }
        }
    }

    /// Sample weights of one ray.
    pub fn weights(&self, ray: usize) -> impl Iterator<Item = f64> + '_ {
        self.samples[self.starts[ray]..self.starts[ray + 1]]
            .iter()
            .map(|r| r.weight)
    }
}

/// Renders a ray batch without retaining gradient state.
pub fn render_rays(
    field: &RadianceField,
    rays: &RayBatch,
    opts: &RenderOptions,
    jitter: Option<&mut Rng>,
) -> Result<Vec<RayOutput>> {
    Ok(RayTape::forward(field, rays, opts, jitter)?.outputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: Image,
    /// Ray distance from the camera center.
    pub depth: Array2<f32>,
    pub opacity: Array2<f32>,
}

/// Renders every pixel of `camera`, starting rays at `near_override` when
/// given instead of `opts.near`.
pub fn render_view(
    field: &RadianceField,
    camera: &Camera,
    opts: &RenderOptions,
    near_override: Option<f64>,
) -> Result<RenderedView> {
    let near = near_override.unwrap_or(opts.near);
    let opts = RenderOptions { near, ..*opts };
    opts.validate()?;
    let (w, h) = (camera.width, camera.height);
    let delta = (opts.far - near) / opts.samples_per_ray as f64;
    let offsets = vec![0.5; opts.samples_per_ray];
    let rows: Vec<Vec<RayOutput>> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut scratch = Vec::with_capacity(opts.samples_per_ray);
            (0..w)
                .map(|col| {
                    let (o, d) = camera.pixel_ray(col, row);
                    scratch.clear();
                    march(
                        field,
                        o,
                        d,
                        near,
                        delta,
                        &offsets,
                        opts.transmittance_cutoff,
                        &mut scratch,
                    )
                    .0
                })
                .collect()
        })
        .collect();
    let mut rgb = Array3::zeros((h, w, 3));
    let mut depth = Array2::zeros((h, w));
    let mut opacity = Array2::zeros((h, w));
    for (row, outs) in rows.iter().enumerate() {
        for (col, o) in outs.iter().enumerate() {
            for c in 0..3 {
                rgb[[row, col, c]] = o.rgb[c] as f32;
            }
            depth[[row, col]] = o.depth as f32;
            opacity[[row, col]] = o.opacity as f32;
        }
    }
    Ok(RenderedView { rgb, depth, opacity })
}
