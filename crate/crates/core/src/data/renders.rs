use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::{to_u8, DepthMap, Image, PixelMask};
use crate::error::{Error, Result};

/// Largest 16-bit depth code; code 0 means "no depth".
pub const DEPTH_MAX_CODE: u16 = u16::MAX;

pub const INDEX_FILE: &str = "index.json";

/// Fixed-point depth encoding: `depth = code * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEncoding {
    pub scale: f64,
}

impl DepthEncoding {
    /// Encoding covering `[0, max_depth]`; the rounding error is at most
    /// `max_depth / 65535 / 2`.
    pub fn for_max_depth(max_depth: f64) -> Result<Self> {
        if !(max_depth > 0.0 && max_depth.is_finite()) {
            return Err(Error::invalid(format!("max depth must be positive, got {max_depth}")));
        }
        Ok(Self {
            scale: max_depth / DEPTH_MAX_CODE as f64,
        })
    }

    pub fn encode(&self, depth: f32) -> u16 {
        if !(depth.is_finite() && depth > 0.0) {
            return 0;
        }
        (depth as f64 / self.scale).round().clamp(1.0, DEPTH_MAX_CODE as f64) as u16
    }

    pub fn decode(&self, code: u16) -> f32 {
        if code == 0 {
            0.0
        } else {
            (code as f64 * self.scale) as f32
        }
    }
}

/// Contents of `index.json` next to saved renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderIndex {
    pub color: Vec<String>,
    pub depth: Vec<String>,
    /// World units per depth code.
    pub depth_scale: f64,
    pub depth_kind: String,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

pub(crate) fn write_rgb_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|ch| to_u8(img[[y, x, ch]])))
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

pub(crate) fn read_rgb_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

pub(crate) fn write_mask_png(path: &Path, mask: &PixelMask) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Reads a mask; gray levels of 128 and above are known.
pub(crate) fn read_mask_png(path: &Path) -> Result<PixelMask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(PixelMask::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

fn write_depth_png(path: &Path, depth: &DepthMap, enc: &DepthEncoding) -> Result<()> {
    let (h, w) = depth.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([enc.encode(depth[[y as usize, x as usize]])])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Reads a 16-bit depth PNG written by [`save_renders`].
pub fn load_depth_png(path: &Path, enc: &DepthEncoding) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(i) => i,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("expected 16-bit grayscale, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = img.dimensions();
    Ok(DepthMap::from_shape_fn((h as usize, w as usize), |(y, x)| {
        enc.decode(img.get_pixel(x as u32, y as u32)[0])
    }))
}

/// Writes `color/NNNN.png` (8-bit) and, when depths are given,
/// `depth/NNNN.png` (16-bit), plus `index.json`.
pub fn save_renders(images: &[Image], depths: &[DepthMap], dir: &Path, enc: &DepthEncoding) -> Result<RenderIndex> {
    if !depths.is_empty() && depths.len() != images.len() {
        return Err(Error::invalid(format!(
            "{} images but {} depth maps",
            images.len(),
            depths.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = RenderIndex {
        color: Vec::with_capacity(images.len()),
        depth: Vec::with_capacity(depths.len()),
        depth_scale: enc.scale,
        depth_kind: "ray distance".into(),
    };
    if !images.is_empty() {
        let p = dir.join("color");
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    if !depths.is_empty() {
        let p = dir.join("depth");
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, img) in images.iter().enumerate() {
        let rel = format!("color/{i:04}.png");
        write_rgb_png(&dir.join(&rel), img)?;
        index.color.push(rel);
    }
    for (i, d) in depths.iter().enumerate() {
        if d.dim() != (images[i].dim().0, images[i].dim().1) {
            return Err(Error::shape(format!("depth map {i} does not match its image")));
        }
        let rel = format!("depth/{i:04}.png");
        write_depth_png(&dir.join(&rel), d, enc)?;
        index.depth.push(rel);
    }
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_vec_pretty(&index).map_err(|e| Error::data(&path, e.to_string()))?;
    write_atomic(&path, &json)?;
    Ok(index)
}

/// Reads `index.json` and every depth map it lists, in order.
pub fn load_render_depths(dir: &Path) -> Result<(RenderIndex, Vec<DepthMap>)> {
    let path = dir.join(INDEX_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: RenderIndex = serde_json::from_slice(&bytes).map_err(|e| Error::data(&path, e.to_string()))?;
    let enc = DepthEncoding {
        scale: index.depth_scale,
    };
    let depths = index
        .depth
        .iter()
        .map(|rel| load_depth_png(&dir.join(rel), &enc))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, depths))
}
