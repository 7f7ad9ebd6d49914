use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::renders::{read_mask_png, read_rgb_png, write_atomic, write_mask_png, write_rgb_png};
use super::{MultiViewDataset, PixelMask, ViewFrame};
use crate::error::{Error, Result};
use crate::field::{Aabb, Background, Camera, ROTATION_TOLERANCE};

pub const MANIFEST_FILE: &str = "transforms.json";

/// Rotations off by more than [`ROTATION_TOLERANCE`] but less than this are
/// snapped to the nearest rotation; anything worse is rejected.
const ROTATION_REPAIR_LIMIT: f64 = 1e-2;

fn default_near() -> f64 {
    0.05
}

fn default_far() -> f64 {
    6.0
}

/// Dataset manifest. Shared intrinsics may be overridden per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fl_x: f64,
    pub fl_y: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: usize,
    pub h: usize,
    #[serde(default)]
    pub background: Background,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb: Option<Aabb>,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file_path: String,
    /// Absent means every pixel is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    /// Camera-to-world, row-major.
    pub transform_matrix: [[f64; 4]; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

fn parse_manifest(bytes: &[u8], path: &Path) -> Result<Manifest> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn frame_camera(m: &Manifest, f: &FrameEntry, index: usize, path: &Path) -> Result<Camera> {
    let mut c2w = Matrix4::zeros();
    for (r, row) in f.transform_matrix.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            c2w[(r, c)] = *v;
        }
    }
    let mut cam = Camera {
        fx: f.fl_x.unwrap_or(m.fl_x),
        fy: f.fl_y.unwrap_or(m.fl_y),
        cx: f.cx.unwrap_or(m.cx),
        cy: f.cy.unwrap_or(m.cy),
        width: m.w,
        height: m.h,
        c2w,
    };
    if c2w.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(
            path,
            format!("frame {index}: transform_matrix has non-finite entries"),
        ));
    }
    let err = cam.rotation_error();
    if err > ROTATION_REPAIR_LIMIT {
        return Err(Error::data(
            path,
            format!("frame {index}: rotation is not orthonormal (error {err:.3e})"),
        ));
    }
    if err > ROTATION_TOLERANCE {
        log::warn!(
            "{}: frame {index}: orthonormalizing rotation (error {err:.3e})",
            path.display()
        );
        cam.orthonormalize();
    }
    cam.validate()
        .map_err(|e| Error::data(path, format!("frame {index}: {e}")))?;
    Ok(cam)
}

fn load_frame(root: &Path, m: &Manifest, f: &FrameEntry, index: usize, manifest_path: &Path) -> Result<ViewFrame> {
    let camera = frame_camera(m, f, index, manifest_path)?;
    let image_path = root.join(&f.file_path);
    let image = read_rgb_png(&image_path)?;
    if image.dim() != (m.h, m.w, 3) {
        return Err(Error::data(
            &image_path,
            format!(
                "resolution mismatch: image is {}x{}, manifest says {}x{}",
                image.dim().1,
                image.dim().0,
                m.w,
                m.h
            ),
        ));
    }
    let known = match &f.mask_path {
        None => PixelMask::from_elem((m.h, m.w), true),
        Some(p) => {
            let mask_path = root.join(p);
            let mask = read_mask_png(&mask_path)?;
            if mask.dim() != (m.h, m.w) {
                return Err(Error::data(
                    &mask_path,
                    format!(
                        "mask size {}x{} does not match image size {}x{}",
                        mask.dim().1,
                        mask.dim().0,
                        m.w,
                        m.h
                    ),
                ));
            }
            mask
        }
    };
    let name = Path::new(&f.file_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("{index:04}"));
    Ok(ViewFrame {
        name,
        image,
        known,
        camera,
    })
}

/// Loads a dataset from `dir/transforms.json` and the files it references.
pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m = parse_manifest(&bytes, &manifest_path)?;
    if m.frames.is_empty() {
        return Err(Error::data(&manifest_path, "manifest lists no frames"));
    }
    if m.w == 0 || m.h == 0 {
        return Err(Error::data(&manifest_path, "w and h must be positive"));
    }
    let frames = m
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| load_frame(dir, &m, f, i, &manifest_path))
        .collect::<Result<Vec<_>>>()?;
    let ds = MultiViewDataset {
        name: m.name.clone(),
        units: m.units.clone(),
        background: m.background,
        bounds: m.aabb,
        near: m.near,
        far: m.far,
        frames,
    };
    ds.validate().map_err(|e| Error::data(&manifest_path, e.to_string()))?;
    Ok(ds)
}

fn file_stem_for(frame: &ViewFrame, index: usize) -> String {
    let safe = !frame.name.is_empty()
        && frame
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if safe {
        frame.name.clone()
    } else {
        format!("{index:04}")
    }
}

/// Writes images, masks and the manifest under `dir`; returns the manifest path.
pub fn save_dataset(dataset: &MultiViewDataset, dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let first = &dataset.frames[0].camera;
    let mut stems: Vec<String> = Vec::with_capacity(dataset.len());
    for (i, f) in dataset.frames.iter().enumerate() {
        let mut stem = file_stem_for(f, i);
        if stems.contains(&stem) {
            stem = format!("{i:04}");
        }
        stems.push(stem);
    }
    let frames = dataset
        .frames
        .par_iter()
        .zip(&stems)
        .map(|(f, stem)| {
            let file_path = format!("images/{stem}.png");
            let mask_path = format!("masks/{stem}.png");
            write_rgb_png(&dir.join(&file_path), &f.image)?;
            write_mask_png(&dir.join(&mask_path), &f.known)?;
            let c = &f.camera;
            let mut tm = [[0.0; 4]; 4];
            for (r, row) in tm.iter_mut().enumerate() {
                for (col, v) in row.iter_mut().enumerate() {
                    *v = c.c2w[(r, col)];
                }
            }
            let differs = |a: f64, b: f64| (a != b).then_some(a);
            Ok(FrameEntry {
                file_path,
                mask_path: Some(mask_path),
                transform_matrix: tm,
                fl_x: differs(c.fx, first.fx),
                fl_y: differs(c.fy, first.fy),
                cx: differs(c.cx, first.cx),
                cy: differs(c.cy, first.cy),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        fl_x: first.fx,
        fl_y: first.fy,
        cx: first.cx,
        cy: first.cy,
        w: first.width,
        h: first.height,
        background: dataset.background,
        name: dataset.name.clone(),
        units: dataset.units.clone(),
        aabb: dataset.bounds,
        near: dataset.near,
        far: dataset.far,
        frames,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&m).map_err(|e| Error::data(&path, e.to_string()))?;
    write_atomic(&path, &json)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_from_line_and_column() {
        let text = b"{\n  \"a\": 1,\n  oops\n}";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 3, 3), 14);
        assert_eq!(text[14], b'o');
    }

    #[test]
    fn parse_error_reports_offset() {
        let text = br#"{"fl_x": 1.0, "fl_y": }"#;
        match parse_manifest(text, Path::new("m.json")).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 22),
            e => panic!("{e}"),
        }
    }
}
