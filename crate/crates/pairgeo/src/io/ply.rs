//! Binary little-endian PLY export of coloured point clouds.

use std::io::Write;
use std::path::Path;

use pairgeo_core::align::ColoredPoint;

use super::write_file;
use crate::error::{Error, Result};

pub fn ply_bytes(points: &[ColoredPoint]) -> Result<Vec<u8>> {
    if points.is_empty() {
        return Err(Error::field("points", "cannot export an empty point cloud"));
    }
    let mut out = Vec::with_capacity(200 + 15 * points.len());
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )
    .expect("writing to a Vec");
    for p in points {
        for c in p.position {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.color);
    }
    Ok(out)
}

pub fn export_ply(points: &[ColoredPoint], path: &Path) -> Result<()> {
    write_file(path, &ply_bytes(points)?)
}
