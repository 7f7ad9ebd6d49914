//! Datasets, masks and the synthetic scene generator.

mod manifest;
mod renders;
mod synthetic;

pub use manifest::{load_dataset, save_dataset, FrameEntry, Manifest, MANIFEST_FILE};
pub use renders::{
    load_depth_png, load_render_depths, save_renders, DepthEncoding, RenderIndex, DEPTH_MAX_CODE, INDEX_FILE,
};
pub use synthetic::{make_synthetic_scene, ray_box, ArcSpec, SceneSpec, SyntheticScene};

use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{Aabb, Background, Camera};

/// RGB image as (height, width, channel), values in [0, 1].
pub type Image = Array3<f32>;

/// Pixel mask, `true` = known.
pub type PixelMask = Array2<bool>;

/// Per-pixel distance from the camera center along the pixel ray; 0 or
/// non-finite marks a missing value.
pub type DepthMap = Array2<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewFrame {
    pub name: String,
    pub image: Image,
    pub known: PixelMask,
    pub camera: Camera,
}

impl ViewFrame {
    pub fn num_unknown(&self) -> usize {
        self.known.iter().filter(|k| !**k).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub name: String,
    /// Free-form unit label for world coordinates.
    pub units: String,
    pub background: Background,
    /// Scene bounds, if known.
    pub bounds: Option<Aabb>,
    /// Ray range used when training on this dataset.
    pub near: f64,
    pub far: f64,
    pub frames: Vec<ViewFrame>,
}

impl MultiViewDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Common (width, height).
    pub fn resolution(&self) -> (usize, usize) {
        self.frames
            .first()
            .map(|f| (f.camera.width, f.camera.height))
            .unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::invalid("dataset has no frames"));
        };
        let (w, h) = (first.camera.width, first.camera.height);
        if !(self.near >= 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::invalid(format!(
                "dataset ray range must satisfy 0 <= near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            f.camera
                .validate()
                .map_err(|e| Error::invalid(format!("frame {i} ({}): {e}", f.name)))?;
            if (f.camera.width, f.camera.height) != (w, h) {
                return Err(Error::shape(format!(
                    "frame {i} ({}) is {}x{}, dataset is {w}x{h}",
                    f.name, f.camera.width, f.camera.height
                )));
            }
            if f.image.dim() != (h, w, 3) || f.known.dim() != (h, w) {
                return Err(Error::shape(format!(
                    "frame {i} ({}): image {:?} / mask {:?} do not match {w}x{h}",
                    f.name,
                    f.image.dim(),
                    f.known.dim()
                )));
            }
            if f.image.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("frame {i} ({}) image", f.name)));
            }
        }
        Ok(())
    }

    /// SHA-256 over every known pixel's position and bytes, in frame order.
    pub fn known_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (i, f) in self.frames.iter().enumerate() {
            hasher.update((i as u64).to_le_bytes());
            for ((y, x), &k) in f.known.indexed_iter() {
                if k {
                    hasher.update((y as u32).to_le_bytes());
                    hasher.update((x as u32).to_le_bytes());
                    for c in 0..3 {
                        hasher.update(f.image[[y, x, c]].to_le_bytes());
                    }
                }
            }
        }
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Rounds to the nearest 8-bit level, as storing and reloading would.
pub fn quantize_8bit(image: &Image) -> Image {
    image.mapv(|v| to_u8(v) as f32 / 255.0)
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MultiViewDataset {
        let cam = Camera::look_at([0.0, 0.0, 2.0], [0.0; 3], [0.0, 1.0, 0.0], 3, 2, 60.0).unwrap();
        MultiViewDataset {
            name: "t".into(),
            units: "m".into(),
            background: Background::White,
            bounds: None,
            near: 0.1,
            far: 4.0,
            frames: vec![ViewFrame {
                name: "a".into(),
                image: Image::from_elem((2, 3, 3), 0.5),
                known: PixelMask::from_elem((2, 3), true),
                camera: cam,
            }],
        }
    }

    #[test]
    fn checksum_ignores_unknown_pixels() {
        let mut d = tiny();
        d.frames[0].known[[1, 2]] = false;
        let before = d.known_checksum();
        d.frames[0].image[[1, 2, 0]] = 0.9;
        assert_eq!(d.known_checksum(), before);
        d.frames[0].image[[0, 0, 0]] = 0.9;
        assert_ne!(d.known_checksum(), before);
    }

    #[test]
    fn validation_catches_shape_mismatch() {
        let mut d = tiny();
        assert!(d.validate().is_ok());
        d.frames[0].known = PixelMask::from_elem((3, 3), true);
        assert!(d.validate().is_err());
        d.frames.clear();
        assert!(d.validate().is_err());
    }

    #[test]
    fn quantization_is_idempotent() {
        let img = Image::from_shape_fn((2, 2, 3), |(y, x, c)| (y * 6 + x * 3 + c) as f32 / 11.3);
        let q = quantize_8bit(&img);
        assert_eq!(quantize_8bit(&q), q);
    }
}
