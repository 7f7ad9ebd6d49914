use ndarray::{s, Array2, Array3};

use super::layout::GridLayout;
use crate::diffusion::{Latent, LatentMask};
use crate::error::{Error, Result};

/// Halves both spatial axes by 2x2 area averaging. The mask is averaged the
/// same way and binarized: above 0.5 is known, 0.5 and below unknown.
pub fn downsample_quarter(image: &Array3<f64>, mask: &Array2<f64>) -> Result<(Array3<f64>, Array2<f64>)> {
    let (h, w, c) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::shape(format!(
            "mask {:?} vs image {:?}",
            mask.dim(),
            image.dim()
        )));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("spatial size {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let img = Array3::from_shape_fn((oh, ow, c), |(y, x, ch)| {
        (image[[2 * y, 2 * x, ch]]
            + image[[2 * y, 2 * x + 1, ch]]
            + image[[2 * y + 1, 2 * x, ch]]
            + image[[2 * y + 1, 2 * x + 1, ch]])
            * 0.25
    });
    let m = Array2::from_shape_fn((oh, ow), |(y, x)| {
        let avg =
            (mask[[2 * y, 2 * x]] + mask[[2 * y, 2 * x + 1]] + mask[[2 * y + 1, 2 * x]] + mask[[2 * y + 1, 2 * x + 1]])
                * 0.25;
        if avg > 0.5 {
            1.0
        } else {
            0.0
        }
    });
    Ok((img, m))
}

/// Doubles both spatial axes by pixel replication.
pub fn upsample_double(image: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = image.dim();
    Array3::from_shape_fn((2 * h, 2 * w, c), |(y, x, ch)| image[[y / 2, x / 2, ch]])
}

/// Binarizes a mask: above 0.5 is known.
pub fn binarize_mask(mask: &LatentMask) -> LatentMask {
    mask.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 })
}

fn origin(q: usize, h: usize, w: usize) -> (usize, usize) {
    ((q / 2) * h, (q % 2) * w)
}

/// Places four equally shaped tensors as quadrants of a 2x2 grid.
pub fn tile4(parts: [&Latent; 4]) -> Result<Latent> {
    let (h, w, c) = parts[0].dim();
    if let Some(p) = parts.iter().find(|p| p.dim() != (h, w, c)) {
        return Err(Error::shape(format!(
            "grid members must share a shape: {:?} vs {:?}",
            parts[0].dim(),
            p.dim()
        )));
    }
    let mut grid = Latent::zeros((2 * h, 2 * w, c));
    for (q, p) in parts.iter().enumerate() {
        let (y0, x0) = origin(q, h, w);
        grid.slice_mut(s![y0..y0 + h, x0..x0 + w, ..]).assign(p);
    }
    Ok(grid)
}

pub fn tile4_mask(parts: [&LatentMask; 4]) -> Result<LatentMask> {
    let (h, w) = parts[0].dim();
    if let Some(p) = parts.iter().find(|p| p.dim() != (h, w)) {
        return Err(Error::shape(format!(
            "grid masks must share a shape: {:?} vs {:?}",
            parts[0].dim(),
            p.dim()
        )));
    }
    let mut grid = LatentMask::zeros((2 * h, 2 * w));
    for (q, p) in parts.iter().enumerate() {
        let (y0, x0) = origin(q, h, w);
        grid.slice_mut(s![y0..y0 + h, x0..x0 + w]).assign(p);
    }
    Ok(grid)
}

/// Splits a grid into its four quadrants, in quadrant order.
pub fn untile4(grid: &Latent) -> Result<[Latent; 4]> {
    let (gh, gw, _) = grid.dim();
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::shape(format!("grid size {gh}x{gw} must be even")));
    }
    let (h, w) = (gh / 2, gw / 2);
    Ok(std::array::from_fn(|q| {
        let (y0, x0) = origin(q, h, w);
        grid.slice(s![y0..y0 + h, x0..x0 + w, ..]).to_owned()
    }))
}

fn member_refs<'a, T>(items: &'a [T], layout: &GridLayout) -> Result<[&'a T; 4]> {
    let m = layout.members();
    if let Some(&bad) = m.iter().find(|&&i| i >= items.len()) {
        return Err(Error::invalid(format!(
            "layout index {bad} outside batch of {}",
            items.len()
        )));
    }
    Ok([&items[m[0]], &items[m[1]], &items[m[2]], &items[m[3]]])
}

/// Tiles the batch members named by `layout` into one grid latent and mask.
pub fn grid_tile(latents: &[Latent], masks: &[LatentMask], layout: &GridLayout) -> Result<(Latent, LatentMask)> {
    Ok((
        tile4(member_refs(latents, layout)?)?,
        tile4_mask(member_refs(masks, layout)?)?,
    ))
}

/// Inverse of [`grid_tile`]: `(batch index, latent)` pairs in quadrant order.
pub fn grid_untile(grid: &Latent, layout: &GridLayout) -> Result<Vec<(usize, Latent)>> {
    Ok(layout.members().into_iter().zip(untile4(grid)?).collect())
}
