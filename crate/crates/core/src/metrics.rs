//! Image metrics and multi-view consistency statistics.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DepthMap, Image, MultiViewDataset, PixelMask};
use crate::error::{Error, Result};
use crate::field::{render_view, RadianceField, RenderOptions};

/// PSNR reported for identical images.
pub const PSNR_SENTINEL: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Fraction of the scene diagonal used as the default evaluation near offset.
pub const DEFAULT_NEAR_OFFSET_FRACTION: f64 = 0.05;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "images differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit-range images, over the pixels where
/// `mask` is true (all pixels without a mask). Capped at [`PSNR_SENTINEL`].
pub fn psnr(a: &Image, b: &Image, mask: Option<&PixelMask>) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, c) = a.dim();
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(Error::shape(format!("mask {:?} vs image {:?}", m.dim(), (h, w))));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m[[y, x]]) {
                continue;
            }
            for ch in 0..c {
                let d = a[[y, x, ch]] as f64 - b[[y, x, ch]] as f64;
                sum += d * d;
            }
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::invalid("psnr over an empty mask"));
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL))
}

/// Rec. 601 luma.
pub fn grayscale(img: &Image) -> Array2<f64> {
    let (h, w, c) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c == 1 {
            img[[y, x, 0]] as f64
        } else {
            0.299 * img[[y, x, 0]] as f64 + 0.587 * img[[y, x, 1]] as f64 + 0.114 * img[[y, x, 2]] as f64
        }
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Local SSIM at every valid window position (no padding); entry `(y, x)`
/// is the window whose top-left corner is `(y, x)`.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Array2<f64>> {
    check_pair(a, b)?;
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let (ga, gb) = (grayscale(a), grayscale(b));
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    Ok(Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, gi) in g.iter().enumerate() {
            for (j, gj) in g.iter().enumerate() {
                let wgt = gi * gj;
                let (va, vb) = (ga[[y + i, x + j]], gb[[y + i, x + j]]);
                ma += wgt * va;
                mb += wgt * vb;
                saa += wgt * va * va;
                sbb += wgt * vb * vb;
                sab += wgt * va * vb;
            }
        }
        let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    }))
}

/// Mean local SSIM of the grayscale images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.mean().unwrap_or(1.0))
}

/// Mean local SSIM over windows whose center pixel is selected by `mask`;
/// `None` when no window qualifies.
pub fn ssim_masked(a: &Image, b: &Image, mask: &PixelMask) -> Result<Option<f64>> {
    let m = ssim_map(a, b)?;
    if mask.dim() != (a.dim().0, a.dim().1) {
        return Err(Error::shape("ssim mask does not match the images"));
    }
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((y, x), v) in m.indexed_iter() {
        if mask[[y + r, x + r]] {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: Option<f64>,
    /// Over known pixels; absent when the view has none.
    pub psnr_known: Option<f64>,
    /// Over initially unknown pixels; absent when the view has none.
    pub psnr_unknown: Option<f64>,
    pub ssim_unknown: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
    pub mean_psnr_known: Option<f64>,
    pub mean_psnr_unknown: Option<f64>,
    pub mean_ssim_unknown: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_view: Option<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    /// Aggregates per-view metrics into means.
    pub fn from_views(views: Vec<ViewMetrics>, config: serde_json::Value) -> Self {
        let mean_psnr = mean_of(views.iter().map(|v| Some(v.psnr))).unwrap_or(f64::NAN);
        Self {
            mean_ssim: mean_of(views.iter().map(|v| v.ssim)),
            mean_psnr_known: mean_of(views.iter().map(|v| v.psnr_known)),
            mean_psnr_unknown: mean_of(views.iter().map(|v| v.psnr_unknown)),
            mean_ssim_unknown: mean_of(views.iter().map(|v| v.ssim_unknown)),
            mean_psnr,
            views,
            cross_view: None,
            config,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("report serialization: {e}")))
    }

    /// One row per view plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("view,psnr,ssim,psnr_known,psnr_unknown,ssim_unknown\n");
        for v in &self.views {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                v.name,
                cell(Some(v.psnr)),
                cell(v.ssim),
                cell(v.psnr_known),
                cell(v.psnr_unknown),
                cell(v.ssim_unknown)
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{},{},{}\n",
            cell(Some(self.mean_psnr)),
            cell(self.mean_ssim),
            cell(self.mean_psnr_known),
            cell(self.mean_psnr_unknown),
            cell(self.mean_ssim_unknown)
        ));
        out
    }
}

/// Metrics of `rendered` against `target`, whole image and unknown region.
pub fn compare_view(name: &str, rendered: &Image, target: &Image, known: &PixelMask) -> Result<ViewMetrics> {
    let unknown = known.mapv(|k| !k);
    let has_unknown = unknown.iter().any(|&u| u);
    let has_known = known.iter().any(|&k| k);
    let big = rendered.dim().0 >= SSIM_WINDOW && rendered.dim().1 >= SSIM_WINDOW;
    Ok(ViewMetrics {
        name: name.to_string(),
        psnr: psnr(rendered, target, None)?,
        ssim: if big { Some(ssim(rendered, target)?) } else { None },
        psnr_known: if has_known {
            Some(psnr(rendered, target, Some(known))?)
        } else {
            None
        },
        psnr_unknown: if has_unknown {
            Some(psnr(rendered, target, Some(&unknown))?)
        } else {
            None
        },
        ssim_unknown: if has_unknown && big {
            ssim_masked(rendered, target, &unknown)?
        } else {
            None
        },
    })
}

/// Default near-plane offset for a dataset: a fraction of the scene
/// diagonal, or of the far distance when bounds are unknown.
pub fn default_near_offset(dataset: &MultiViewDataset) -> f64 {
    let scale = dataset.bounds.map(|b| b.diagonal()).unwrap_or(dataset.far);
    DEFAULT_NEAR_OFFSET_FRACTION * scale
}

/// Renders every view with rays starting `near_offset` beyond the
/// dataset's near distance and compares them with the dataset images.
pub fn eval_dataset_consistency(
    field: &RadianceField,
    dataset: &MultiViewDataset,
    opts: &RenderOptions,
    near_offset: f64,
) -> Result<MetricReport> {
    if !(near_offset >= 0.0 && near_offset.is_finite()) {
        return Err(Error::invalid(format!("near offset must be >= 0, got {near_offset}")));
    }
    let opts = RenderOptions {
        near: dataset.near,
        far: dataset.far,
        ..*opts
    };
    let near = dataset.near + near_offset;
    let views = dataset
        .frames
        .par_iter()
        .map(|f| {
            let r = render_view(field, &f.camera, &opts, Some(near))?;
            compare_view(&f.name, &r.rgb, &f.image, &f.known)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_views(
        views,
        serde_json::json!({"near_offset": near_offset, "render": opts}),
    ))
}

/// Relative depth tolerance for deciding that a reprojected point is the
/// surface seen by the target pixel.
pub const REPROJECTION_DEPTH_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossViewStats {
    /// Mean absolute per-channel color difference over correspondences.
    pub mean_abs_diff: f64,
    pub correspondences: usize,
}

/// Consistency of content across views in their unknown regions.
///
/// Every unknown pixel of every view (or every `stride`-th one) is lifted
/// to 3D with the ground-truth depth and projected into each other view.
/// Where it lands on an unknown pixel that sees the same surface (depth
/// agrees within [`REPROJECTION_DEPTH_TOLERANCE`]), the colors are compared.
pub fn cross_view_consistency(
    images: &[Image],
    known: &[PixelMask],
    dataset: &MultiViewDataset,
    gt_depth: &[DepthMap],
    stride: usize,
) -> Result<CrossViewStats> {
    let n = dataset.len();
    if gt_depth.len() != n {
        return Err(Error::invalid(format!(
            "ground-truth depth is missing: {} maps for {n} views",
            gt_depth.len()
        )));
    }
    if images.len() != n || known.len() != n {
        return Err(Error::invalid(format!(
            "{} images and {} masks for {n} views",
            images.len(),
            known.len()
        )));
    }
    let (w, h) = dataset.resolution();
    for i in 0..n {
        if images[i].dim() != (h, w, 3) || known[i].dim() != (h, w) || gt_depth[i].dim() != (h, w) {
            return Err(Error::shape(format!("view {i} does not match the dataset resolution")));
        }
    }
    let stride = stride.max(1);
    let per_view: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cam = &dataset.frames[i].camera;
            let (mut sum, mut count) = (0.0, 0usize);
            let mut k = 0usize;
            for ((row, col), &kn) in known[i].indexed_iter() {
                if kn {
                    continue;
                }
                k += 1;
                if !(k - 1).is_multiple_of(stride) {
                    continue;
                }
                let t = gt_depth[i][[row, col]] as f64;
                if !(t.is_finite() && t > 0.0) {
                    continue;
                }
                let (o, d) = cam.pixel_ray(col, row);
                let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                for j in (0..n).filter(|&j| j != i) {
                    let Some((px, py, dist)) = dataset.frames[j].camera.project(p) else {
                        continue;
                    };
                    if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                        continue;
                    }
                    let (cx, cy) = (px as usize, py as usize);
                    if known[j][[cy, cx]] {
                        continue;
                    }
                    let dj = gt_depth[j][[cy, cx]] as f64;
                    if !(dj.is_finite() && dj > 0.0) || (dj - dist).abs() > REPROJECTION_DEPTH_TOLERANCE * dist {
                        continue;
                    }
                    let diff: f64 = (0..3)
                        .map(|c| (images[i][[row, col, c]] as f64 - images[j][[cy, cx, c]] as f64).abs())
                        .sum::<f64>()
                        / 3.0;
                    sum += diff;
                    count += 1;
                }
            }
            (sum, count)
        })
        .collect();
    let (sum, count) = per_view
        .into_iter()
        .fold((0.0, 0usize), |(s, c), (vs, vc)| (s + vs, c + vc));
    if count == 0 {
        return Err(Error::invalid("no cross-view correspondences in the unknown regions"));
    }
    Ok(CrossViewStats {
        mean_abs_diff: sum / count as f64,
        correspondences: count,
    })
}
