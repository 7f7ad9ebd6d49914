//! Procedural box room with a box occluder.
//!
//! The room is an inside-out box with a checkered floor and patterned
//! walls, holding a few colored boxes. Cameras sit on a horizontal arc and
//! look at a target. Images are rendered from a voxelized copy of the scene
//! so a field of the same resolution can fit them exactly; masks and depth
//! come from exact ray-box intersection.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{quantize_8bit, DepthMap, Image, MultiViewDataset, PixelMask, ViewFrame};
use crate::error::{Error, Result};
use crate::field::{logit, render_view, softplus_inv, Aabb, Background, Camera, RadianceField, RenderOptions};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcSpec {
    /// Horizontal distance from the target.
    pub radius: f64,
    /// Camera height (world y).
    pub height: f64,
    pub start_degrees: f64,
    pub end_degrees: f64,
    pub target: [f64; 3],
}

impl Default for ArcSpec {
    fn default() -> Self {
        Self {
            radius: 1.6,
            height: 1.1,
            start_degrees: -70.0,
            end_degrees: 70.0,
            target: [0.0, 0.45, 0.0],
        }
    }
}

impl ArcSpec {
    /// `n` camera positions evenly spaced from the start to the end angle.
    pub fn eyes(&self, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|i| {
                let f = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                let theta = (self.start_degrees + f * (self.end_degrees - self.start_degrees)).to_radians();
                [
                    self.target[0] + self.radius * theta.sin(),
                    self.height,
                    self.target[2] + self.radius * theta.cos(),
                ]
            })
            .collect()
    }

    /// Cameras at [`ArcSpec::eyes`] looking at the target.
    pub fn cameras(&self, n: usize, width: usize, height: usize, fov_y_degrees: f64) -> Result<Vec<Camera>> {
        self.eyes(n)
            .into_iter()
            .map(|eye| Camera::look_at(eye, self.target, [0.0, 1.0, 0.0], width, height, fov_y_degrees))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub num_boxes: usize,
    /// Range of box edge lengths.
    pub box_size: [f64; 2],
    /// Occluder corners; a degenerate box occludes nothing.
    pub occluder_min: [f64; 3],
    pub occluder_max: [f64; 3],
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_y_degrees: f64,
    pub arc: ArcSpec,
    /// Voxels per axis of the ground-truth field.
    pub field_resolution: usize,
    pub checker_size: f64,
    /// Density of solid voxels, per world unit.
    pub solid_density: f64,
    pub samples_per_ray: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room_min: [-2.0, 0.0, -2.0],
            room_max: [2.0, 2.0, 2.0],
            num_boxes: 4,
            box_size: [0.3, 0.7],
            occluder_min: [-0.35, 0.0, -0.35],
            occluder_max: [0.35, 0.9, 0.35],
            num_views: 60,
            width: 32,
            height: 32,
            fov_y_degrees: 60.0,
            arc: ArcSpec::default(),
            field_resolution: 64,
            checker_size: 0.5,
            solid_density: 80.0,
            samples_per_ray: 128,
        }
    }
}

/// Room-interior density, low enough to be invisible.
const EMPTY_DENSITY_RAW: f64 = -12.0;

#[derive(Debug, Clone, PartialEq)]
struct ColoredBox {
    min: [f64; 3],
    max: [f64; 3],
    color: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Training views: unknown pixels are zeroed.
    pub dataset: MultiViewDataset,
    /// The complete views, occluded content included.
    pub gt_images: Vec<Image>,
    /// Ray distance to the scene (occluder excluded), per view.
    pub gt_depth: Vec<DepthMap>,
    pub gt_field: RadianceField,
    pub spec: SceneSpec,
}

/// Entry and exit distances of a ray through a box, with the entry
/// clamped to 0 when the origin is inside. `None` if the ray misses or the
/// box has no volume.
pub fn ray_box(origin: [f64; 3], dir: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if !(max[a] > min[a]) {
            return None;
        }
        if dir[a] == 0.0 {
            if origin[a] < min[a] || origin[a] > max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut near, mut far) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        t0 = t0.max(near);
        t1 = t1.min(far);
    }
    (t0 <= t1).then_some((t0, t1))
}

impl SceneSpec {
    pub fn room(&self) -> Result<Aabb> {
        Aabb::new(self.room_min, self.room_max)
    }

    pub fn validate(&self) -> Result<()> {
        let room = self.room()?;
        for a in 0..3 {
            if self.occluder_min[a] > self.occluder_max[a] {
                return Err(Error::invalid("occluder min exceeds max"));
            }
        }
        if !(room.contains(self.occluder_min) && room.contains(self.occluder_max)) {
            return Err(Error::invalid(format!(
                "occluder {:?}..{:?} lies outside the room {:?}..{:?}",
                self.occluder_min, self.occluder_max, self.room_min, self.room_max
            )));
        }
        if self.num_views == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("need at least one view of positive size"));
        }
        if !(self.fov_y_degrees > 0.0 && self.fov_y_degrees < 180.0) {
            return Err(Error::invalid("fov_y_degrees must be in (0, 180)"));
        }
        if self.field_resolution < 2 {
            return Err(Error::invalid("field_resolution must be >= 2"));
        }
        if !(self.box_size[0] > 0.0 && self.box_size[1] >= self.box_size[0]) {
            return Err(Error::invalid("box_size must be 0 < min <= max"));
        }
        if !(self.checker_size > 0.0 && self.solid_density > 0.0) {
            return Err(Error::invalid("checker_size and solid_density must be positive"));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::invalid("samples_per_ray must be >= 2"));
        }
        for cam in self.camera_eyes() {
            if !room.contains(cam) {
                return Err(Error::invalid(format!("camera at {cam:?} lies outside the room")));
            }
        }
        Ok(())
    }

    fn camera_eyes(&self) -> Vec<[f64; 3]> {
        self.arc.eyes(self.num_views)
    }

    /// Cameras along the arc, in order.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.arc
            .cameras(self.num_views, self.width, self.height, self.fov_y_degrees)
    }

    /// Field bounds: the room grown by one voxel on every side so walls
    /// occupy the outer voxel layer.
    pub fn field_bounds(&self) -> Aabb {
        let r = self.field_resolution as f64;
        let grow = |a: usize| (self.room_max[a] - self.room_min[a]) / (r - 2.0);
        Aabb {
            min: [0, 1, 2].map(|a| self.room_min[a] - grow(a)),
            max: [0, 1, 2].map(|a| self.room_max[a] + grow(a)),
        }
    }
}

fn checker(u: f64, v: f64, size: f64) -> bool {
    ((u / size).floor() as i64 + (v / size).floor() as i64).rem_euclid(2) == 0
}

fn mix(a: [f64; 3], b: [f64; 3], pick_a: bool) -> [f64; 3] {
    if pick_a {
        a
    } else {
        b
    }
}

struct Scene<'a> {
    spec: &'a SceneSpec,
    boxes: Vec<ColoredBox>,
}

impl Scene<'_> {
    /// Ray distance to the first scene surface.
    fn depth(&self, o: [f64; 3], d: [f64; 3]) -> f64 {
        let s = self.spec;
        let mut t = ray_box(o, d, s.room_min, s.room_max).map_or(f64::INFINITY, |(_, exit)| exit);
        for b in &self.boxes {
            if let Some((enter, _)) = ray_box(o, d, b.min, b.max) {
                t = t.min(enter);
            }
        }
        t
    }

    fn inside_box(&self, p: [f64; 3]) -> Option<&ColoredBox> {
        self.boxes
            .iter()
            .find(|b| (0..3).all(|a| p[a] >= b.min[a] && p[a] <= b.max[a]))
    }

    /// Surface color attributed to a point, from the nearest room face or
    /// the box containing it.
    fn color(&self, p: [f64; 3], margin: f64) -> [f64; 3] {
        let s = self.spec;
        for b in &self.boxes {
            if (0..3).all(|a| p[a] >= b.min[a] - margin && p[a] <= b.max[a] + margin) {
                return b.color;
            }
        }
        let c = s.checker_size;
        let faces = [
            (p[1] - s.room_min[1], 0),
            (s.room_max[1] - p[1], 1),
            (p[0] - s.room_min[0], 2),
            (s.room_max[0] - p[0], 3),
            (p[2] - s.room_min[2], 4),
            (s.room_max[2] - p[2], 5),
        ];
        let face = faces
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|f| f.1)
            .unwrap_or(0);
        match face {
            0 => mix([0.85, 0.8, 0.7], [0.35, 0.3, 0.28], checker(p[0], p[2], c)),
            1 => [0.9, 0.9, 0.9],
            2 => mix([0.7, 0.25, 0.2], [0.8, 0.55, 0.45], checker(p[1], p[2], 2.0 * c)),
            3 => mix([0.2, 0.45, 0.7], [0.5, 0.7, 0.85], checker(p[1], p[2], 2.0 * c)),
            4 => mix([0.3, 0.6, 0.3], [0.6, 0.8, 0.5], checker(p[0], p[1], 2.0 * c)),
            _ => mix([0.75, 0.7, 0.3], [0.9, 0.85, 0.55], checker(p[0], p[1], 2.0 * c)),
        }
    }

    fn voxelize(&self) -> Result<RadianceField> {
        let s = self.spec;
        let r = s.field_resolution;
        let bounds = s.field_bounds();
        let mut field = RadianceField::constant([r, r, r], bounds, Background::White, EMPTY_DENSITY_RAW, [0.0; 3])?;
        let solid_raw = softplus_inv(s.solid_density);
        let margin = field.cell_size().iter().cloned().fold(0.0, f64::max);
        let room = s.room()?;
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let p = field.voxel_center(x, y, z);
                    let solid = !room.contains(p) || self.inside_box(p).is_some();
                    let color = self.color(p, margin).map(logit);
                    let v = field.voxel_index(x, y, z);
                    field.set_voxel(v, if solid { solid_raw } else { EMPTY_DENSITY_RAW }, color);
                }
            }
        }
        Ok(field)
    }
}

/// True when a box overlaps the occluder or sits between a camera and any
/// part of the occluder, which would hide the region to inpaint.
fn hides_occluder(spec: &SceneSpec, eyes: &[[f64; 3]], min: [f64; 3], max: [f64; 3]) -> bool {
    let (omin, omax) = (spec.occluder_min, spec.occluder_max);
    if (0..3).all(|a| min[a] <= omax[a] && max[a] >= omin[a]) {
        return true;
    }
    let lerp = |a: usize, k: usize| omin[a] + (omax[a] - omin[a]) * k as f64 / 2.0;
    let targets: Vec<[f64; 3]> = (0..27)
        .map(|i| [lerp(0, i % 3), lerp(1, i / 3 % 3), lerp(2, i / 9)])
        .collect();
    eyes.iter().any(|e| {
        targets.iter().any(|t| {
            let d = [0, 1, 2].map(|a| t[a] - e[a]);
            let len = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len == 0.0 {
                return false;
            }
            let d = d.map(|v| v / len);
            matches!(ray_box(*e, d, min, max), Some((enter, _)) if enter < len)
        })
    })
}

fn place_boxes(spec: &SceneSpec, eyes: &[[f64; 3]], rng: &mut Rng) -> Vec<ColoredBox> {
    const PALETTE: [[f64; 3]; 6] = [
        [0.85, 0.2, 0.2],
        [0.2, 0.7, 0.3],
        [0.2, 0.35, 0.85],
        [0.9, 0.75, 0.15],
        [0.65, 0.3, 0.75],
        [0.15, 0.75, 0.8],
    ];
    let inset = 0.2;
    let mut boxes = Vec::with_capacity(spec.num_boxes);
    let mut attempts = 0;
    while boxes.len() < spec.num_boxes && attempts < 10_000 {
        attempts += 1;
        let size: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(spec.box_size[0]..=spec.box_size[1]));
        let lo = [0, 2].map(|a| spec.room_min[a] + inset);
        let hi = [0, 2].map(|a| spec.room_max[a] - inset - size[a]);
        if hi[0] <= lo[0] || hi[1] <= lo[1] {
            continue;
        }
        let x = rng.gen_range(lo[0]..hi[0]);
        let z = rng.gen_range(lo[1]..hi[1]);
        let min = [x, spec.room_min[1], z];
        let max = [
            x + size[0],
            (spec.room_min[1] + size[1]).min(spec.room_max[1]),
            z + size[2],
        ];
        let clearance = 0.3;
        let blocks_camera = eyes
            .iter()
            .any(|e| (0..3).all(|a| e[a] >= min[a] - clearance && e[a] <= max[a] + clearance));
        if blocks_camera || hides_occluder(spec, eyes, min, max) {
            continue;
        }
        let color = PALETTE[boxes.len() % PALETTE.len()];
        boxes.push(ColoredBox { min, max, color });
    }
    boxes
}

/// Builds the room, renders every view and computes masks and depth.
pub fn make_synthetic_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<SyntheticScene> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    let eyes: Vec<[f64; 3]> = cameras.iter().map(|c| c.origin()).collect();
    let scene = Scene {
        spec,
        boxes: place_boxes(spec, &eyes, rng),
    };
    let gt_field = scene.voxelize()?;
    let bounds = spec.field_bounds();
    let opts = RenderOptions {
        samples_per_ray: spec.samples_per_ray,
        near: 0.02,
        far: bounds.diagonal(),
        transmittance_cutoff: 1e-4,
    };
    let views: Vec<(Image, Image, PixelMask, DepthMap)> = cameras
        .par_iter()
        .map(|cam| {
            let full = quantize_8bit(&render_view(&gt_field, cam, &opts, None)?.rgb);
            let (w, h) = (cam.width, cam.height);
            let mut known = PixelMask::from_elem((h, w), true);
            let mut depth = DepthMap::zeros((h, w));
            for row in 0..h {
                for col in 0..w {
                    let (o, d) = cam.pixel_ray(col, row);
                    let t_scene = scene.depth(o, d);
                    depth[[row, col]] = t_scene as f32;
                    if let Some((t_occ, _)) = ray_box(o, d, spec.occluder_min, spec.occluder_max) {
                        if t_occ < t_scene {
                            known[[row, col]] = false;
                        }
                    }
                }
            }
            let mut image = full.clone();
            for ((y, x), k) in known.indexed_iter() {
                if !k {
                    for c in 0..3 {
                        image[[y, x, c]] = 0.0;
                    }
                }
            }
            Ok((image, full, known, depth))
        })
        .collect::<Result<_>>()?;

    let mut frames = Vec::with_capacity(views.len());
    let mut gt_images = Vec::with_capacity(views.len());
    let mut gt_depth = Vec::with_capacity(views.len());
    for (i, ((image, full, known, depth), camera)) in views.into_iter().zip(cameras).enumerate() {
        frames.push(ViewFrame {
            name: format!("view_{i:03}"),
            image,
            known,
            camera,
        });
        gt_images.push(full);
        gt_depth.push(depth);
    }
    let dataset = MultiViewDataset {
        name: "synthetic-room".into(),
        units: "m".into(),
        background: Background::White,
        bounds: Some(bounds),
        near: 0.05,
        far: bounds.diagonal(),
        frames,
    };
    Ok(SyntheticScene {
        dataset,
        gt_images,
        gt_depth,
        gt_field,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    fn small() -> SceneSpec {
        SceneSpec {
            num_views: 3,
            width: 8,
            height: 8,
            field_resolution: 16,
            samples_per_ray: 32,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn ray_box_cases() {
        let (o, d) = ([0.0, 0.0, -5.0], [0.0, 0.0, 1.0]);
        assert_eq!(ray_box(o, d, [-1.0; 3], [1.0; 3]), Some((4.0, 6.0)));
        assert_eq!(ray_box([0.0; 3], d, [-1.0; 3], [1.0; 3]), Some((0.0, 1.0)));
        assert_eq!(ray_box(o, [0.0, 0.0, -1.0], [-1.0; 3], [1.0; 3]), None);
        assert_eq!(ray_box(o, d, [-1.0, -1.0, 0.0], [1.0, 1.0, 0.0]), None);
    }

    #[test]
    fn occluder_outside_room_rejected() {
        let spec = SceneSpec {
            occluder_max: [0.35, 3.0, 0.35],
            ..small()
        };
        assert!(make_synthetic_scene(&spec, &mut derive(0, &[])).is_err());
    }

    #[test]
    fn zero_volume_occluder_masks_nothing() {
        let spec = SceneSpec {
            occluder_min: [0.0, 0.0, 0.0],
            occluder_max: [0.0, 0.5, 0.5],
            ..small()
        };
        let s = make_synthetic_scene(&spec, &mut derive(0, &[])).unwrap();
        assert!(s.dataset.frames.iter().all(|f| f.known.iter().all(|&k| k)));
    }

    #[test]
    fn default_occluder_masks_the_center() {
        let s = make_synthetic_scene(&small(), &mut derive(0, &[])).unwrap();
        for f in &s.dataset.frames {
            assert!(!f.known[[4, 4]]);
            assert!(f.known[[0, 0]]);
        }
        assert_eq!(s.gt_images.len(), 3);
        assert!(s.gt_depth.iter().all(|d| d.iter().all(|v| v.is_finite() && *v > 0.0)));
    }
}
