//! Inference output directories.
//!
//! The per-view depth, normal and mask files use the sample layout so that
//! `eval` can read predictions and ground truth with the same code:
//!
//! ```text
//! outputs.json             schema_version, resolution [w, h], descriptor_dim
//! depth_{0,1}.bin          z channel of the local pointmap, float32 LE, H·W
//! normal_{0,1}.bin         float32 LE, H·W·3
//! mask_{0,1}.png           pixels with positive predicted depth
//! pointmap_local_{0,1}.bin float32 LE, H·W·3, own frame
//! pointmap_cross_{0,1}.bin float32 LE, H·W·3, other view's frame
//! depth_head_{0,1}.bin     dedicated depth head, float32 LE, H·W
//! descriptors_{0,1}.bin    float32 LE, H·W·descriptor_dim
//! matches.bin              reciprocal nearest-neighbour matches, uint32 LE pairs
//! normal_vis_{0,1}.png     (n + 1) / 2 as RGB
//! depth_vis_{0,1}.png      min-max normalized grayscale
//! ```

use std::fs;
use std::path::Path;

use pairgeo_core::geometry::{pointmap_to_depth, DepthMap, Frame, Mask, NormalMap, Pointmap, Vec3};
use pairgeo_core::model::{DescriptorMap, HeadOutputs};
use pairgeo_core::synth::{CorrespondenceSet, Image};
use serde::{Deserialize, Serialize};

use super::sample::{match_bytes, read_matches};
use super::{f32_bytes, read_f32, read_json, read_mask, write_file, write_gray, write_json, write_mask, write_png_rgb};
use crate::error::{Error, Result};

pub const OUTPUTS_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputsMeta {
    pub schema_version: u32,
    pub resolution: [usize; 2],
    pub descriptor_dim: usize,
}

fn vec3_bytes(v: &[Vec3]) -> Vec<u8> {
    f32_bytes(v.iter().flatten().copied())
}

fn to_vec3(flat: Vec<f64>) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// 8-bit grayscale with the valid depth range stretched to [0, 255].
/// Invalid pixels are black.
pub fn depth_visualization(depth: &DepthMap) -> Vec<u8> {
    let valid: Vec<f64> = depth.mask.valid_indices().map(|i| depth.depth[i]).collect();
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    depth
        .depth
        .iter()
        .enumerate()
        .map(|(i, d)| if depth.mask.get(i) { ((d - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

pub fn normal_visualization(normals: &NormalMap) -> Image {
    let data = normals.normals.iter().flatten().map(|c| ((c + 1.0) * 0.5) as f32).collect();
    Image { width: normals.width, height: normals.height, data }
}

pub fn write_outputs(outs: &[HeadOutputs; 2], matches: &CorrespondenceSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (outs[0].width(), outs[0].height());
    let dim = outs[0].descriptors.dim;
    write_json(
        &dir.join("outputs.json"),
        &OutputsMeta { schema_version: OUTPUTS_SCHEMA_VERSION, resolution: [w, h], descriptor_dim: dim },
    )?;
    for (v, o) in outs.iter().enumerate() {
        let depth = pointmap_to_depth(&o.pointmap_local, Frame::View(v as u32))?;
        write_file(&dir.join(format!("depth_{v}.bin")), &f32_bytes(depth.depth.iter().copied()))?;
        write_file(&dir.join(format!("normal_{v}.bin")), &vec3_bytes(&o.normals.normals))?;
        write_mask(&dir.join(format!("mask_{v}.png")), &depth.mask)?;
        write_file(&dir.join(format!("pointmap_local_{v}.bin")), &vec3_bytes(&o.pointmap_local.points))?;
        write_file(&dir.join(format!("pointmap_cross_{v}.bin")), &vec3_bytes(&o.pointmap_cross.points))?;
        write_file(&dir.join(format!("depth_head_{v}.bin")), &f32_bytes(o.depth.depth.iter().copied()))?;
        write_file(&dir.join(format!("descriptors_{v}.bin")), &f32_bytes(o.descriptors.data.iter().copied()))?;
        write_png_rgb(&dir.join(format!("normal_vis_{v}.png")), &normal_visualization(&o.normals))?;
        write_gray(&dir.join(format!("depth_vis_{v}.png")), w, h, depth_visualization(&depth))?;
    }
    write_file(&dir.join("matches.bin"), &match_bytes(matches))
}

/// Reads back everything [`write_outputs`] wrote. Every map carries the
/// stored mask.
pub fn read_outputs(dir: &Path) -> Result<([HeadOutputs; 2], CorrespondenceSet)> {
    let meta: OutputsMeta = read_json(&dir.join("outputs.json"), "outputs")?;
    if meta.schema_version != OUTPUTS_SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found: meta.schema_version, expected: OUTPUTS_SCHEMA_VERSION });
    }
    let [w, h] = meta.resolution;
    let n = w * h;
    let mut views = Vec::with_capacity(2);
    for v in 0..2u32 {
        let own = Frame::View(v);
        let other = Frame::View(1 - v);
        let mask: Mask = read_mask(&dir.join(format!("mask_{v}.png")), "mask", w, h)?;
        let local = to_vec3(read_f32(&dir.join(format!("pointmap_local_{v}.bin")), "pointmap_local", 3 * n)?);
        let cross = to_vec3(read_f32(&dir.join(format!("pointmap_cross_{v}.bin")), "pointmap_cross", 3 * n)?);
        let normals = to_vec3(read_f32(&dir.join(format!("normal_{v}.bin")), "normal", 3 * n)?);
        let depth = read_f32(&dir.join(format!("depth_head_{v}.bin")), "depth_head", n)?;
        let desc = read_f32(&dir.join(format!("descriptors_{v}.bin")), "descriptors", meta.descriptor_dim * n)?;
        views.push(HeadOutputs {
            pointmap_local: Pointmap::new(w, h, local, own, mask.clone())?,
            pointmap_cross: Pointmap::new(w, h, cross, other, mask.clone())?,
            normals: NormalMap::new(w, h, normals, own, mask.clone())?,
            depth: DepthMap::new(w, h, depth, mask)?,
            descriptors: DescriptorMap::new(w, h, meta.descriptor_dim, desc)?,
        });
    }
    let matches = read_matches(&dir.join("matches.bin"))?;
    let [a, b]: [HeadOutputs; 2] = views.try_into().map_err(|_| Error::field("outputs", "expected two views"))?;
    Ok(([a, b], matches))
}
