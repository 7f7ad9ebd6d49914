//! Field checkpoints.
//!
//! Layout: the magic bytes `GFV1`, a little-endian `u32` header length, a
//! JSON header `{"resolution", "bounds", "background", "dtype": "f64"}`,
//! then the raw density grid (`X*Y*Z` values) and the raw color grid
//! (`X*Y*Z*3` values, RGB per voxel), little-endian, voxel `(x, y, z)` at
//! `x + X * (y + Y * z)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Aabb, Background, RadianceField, PARAMS_PER_VOXEL};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFV1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    resolution: [usize; 3],
    bounds: Aabb,
    background: Background,
    dtype: String,
}

pub fn write_field<W: Write>(field: &RadianceField, mut w: W) -> std::io::Result<()> {
    let header = Header {
        resolution: field.resolution(),
        bounds: *field.bounds(),
        background: field.background(),
        dtype: "f64".into(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let p = field.params();
    for v in p.chunks_exact(PARAMS_PER_VOXEL) {
        w.write_all(&v[0].to_le_bytes())?;
    }
    for v in p.chunks_exact(PARAMS_PER_VOXEL) {
        for c in &v[1..] {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()
}

/// Writes atomically: to a sibling temporary file, then renamed.
pub fn save_field(field: &RadianceField, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_field(field, BufWriter::new(file)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_field<R: Read>(mut r: R, path: &Path) -> Result<RadianceField> {
    let bad = |m: String| Error::data(path, m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("not a field checkpoint (magic {magic:?})")));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(bad(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Parse {
        path: path.into(),
        offset: 8 + e.column().saturating_sub(1),
        message: e.to_string(),
    })?;
    if header.dtype != "f64" {
        return Err(bad(format!("unsupported dtype {:?}", header.dtype)));
    }
    let n = header
        .resolution
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0 && n <= 1 << 30)
        .ok_or_else(|| bad(format!("bad resolution {:?}", header.resolution)))?;
    let density = read_f64s(&mut r, n).map_err(|e| Error::io(path, e))?;
    let color = read_f64s(&mut r, 3 * n).map_err(|e| Error::io(path, e))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after color grid".into()));
    }
    let mut params = Vec::with_capacity(n * PARAMS_PER_VOXEL);
    for i in 0..n {
        params.extend_from_slice(&[density[i], color[3 * i], color[3 * i + 1], color[3 * i + 2]]);
    }
    RadianceField::from_params(header.resolution, header.bounds, header.background, params)
}

pub fn load_field(path: &Path) -> Result<RadianceField> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_field(BufReader::new(file), path)
}
