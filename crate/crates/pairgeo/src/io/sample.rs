//! Sample directories.
//!
//! ```text
//! meta.json          schema_version, resolution [w, h], seed, and per view
//!                    intrinsics {fx, fy, cx, cy} and a 4×4 row-major
//!                    camera-to-world pose
//! image_{0,1}.png    8-bit RGB
//! depth_{0,1}.bin    float32 LE, row-major, H·W
//! normal_{0,1}.bin   float32 LE, row-major, H·W·3
//! mask_{0,1}.png     8-bit, 255 = valid
//! matches.bin        uint32 LE pairs (idx1, idx2), row-major pixel indices
//! ```
//!
//! Pointmaps are not stored; they are rebuilt from depth and intrinsics,
//! which reproduces them exactly.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use pairgeo_core::geometry::{unproject_depth_to_pointmap, CameraIntrinsics, DepthMap, Frame, NormalMap, RigidPose};
use pairgeo_core::synth::{CorrespondenceSet, ViewData, ViewPairSample};
use serde::{Deserialize, Serialize};

use super::{
    f32_bytes, read_f32, read_file, read_json, read_mask, read_png_rgb, write_file, write_json, write_mask,
    write_png_rgb,
};
use crate::error::{Error, Result};

pub const SAMPLE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsMeta {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub intrinsics: IntrinsicsMeta,
    pub pose: [[f64; 4]; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub schema_version: u32,
    pub resolution: [usize; 2],
    pub seed: u64,
    pub views: [ViewMeta; 2],
}

pub(crate) fn pose_rows(p: &RigidPose) -> [[f64; 4]; 4] {
    let m = p.to_matrix4();
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

pub(crate) fn pose_from_rows(rows: &[[f64; 4]; 4], field: &str) -> Result<RigidPose> {
    let m = Matrix4::from_fn(|r, c| rows[r][c]);
    RigidPose::from_matrix4(&m).map_err(|e| Error::field(field, e))
}

pub fn write_sample(sample: &ViewPairSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = sample.resolution();
    let views = std::array::from_fn(|v| {
        let k = &sample.views[v].intrinsics;
        ViewMeta {
            intrinsics: IntrinsicsMeta { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy },
            pose: pose_rows(&sample.views[v].pose),
        }
    });
    let meta = SampleMeta { schema_version: SAMPLE_SCHEMA_VERSION, resolution: [w, h], seed: sample.seed, views };
    write_json(&dir.join("meta.json"), &meta)?;
    for (v, view) in sample.views.iter().enumerate() {
        write_png_rgb(&dir.join(format!("image_{v}.png")), &view.image)?;
        write_file(&dir.join(format!("depth_{v}.bin")), &f32_bytes(view.depth.depth.iter().copied()))?;
        write_file(&dir.join(format!("normal_{v}.bin")), &f32_bytes(view.normals.normals.iter().flatten().copied()))?;
        write_mask(&dir.join(format!("mask_{v}.png")), &view.depth.mask)?;
    }
    write_file(&dir.join("matches.bin"), &match_bytes(&sample.matches))
}

pub(crate) fn match_bytes(m: &CorrespondenceSet) -> Vec<u8> {
    m.pairs.iter().flat_map(|(a, b)| a.to_le_bytes().into_iter().chain(b.to_le_bytes())).collect()
}

pub(crate) fn read_matches(path: &Path) -> Result<CorrespondenceSet> {
    let bytes = read_file(path).map_err(|e| Error::field("matches", e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::field("matches", format!("length {} is not a multiple of 8", bytes.len())));
    }
    let u = |c: &[u8]| u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    Ok(CorrespondenceSet { pairs: bytes.chunks_exact(8).map(|c| (u(&c[..4]), u(&c[4..]))).collect() })
}

pub fn read_sample_meta(dir: &Path) -> Result<SampleMeta> {
    let meta: SampleMeta = read_json(&dir.join("meta.json"), "meta")?;
    if meta.schema_version != SAMPLE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found: meta.schema_version, expected: SAMPLE_SCHEMA_VERSION });
    }
    Ok(meta)
}

pub fn read_sample(dir: &Path) -> Result<ViewPairSample> {
    let meta = read_sample_meta(dir)?;
    let [w, h] = meta.resolution;
    let mut views = Vec::with_capacity(2);
    for (v, vm) in meta.views.iter().enumerate() {
        let frame = Frame::View(v as u32);
        let k = vm.intrinsics;
        let intrinsics =
            CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, w, h).map_err(|e| Error::field("intrinsics", e))?;
        let pose = pose_from_rows(&vm.pose, "pose")?;
        let image = read_png_rgb(&dir.join(format!("image_{v}.png")), "image")?;
        if (image.width, image.height) != (w, h) {
            return Err(Error::field("image", format!("expected {w}x{h}, found {}x{}", image.width, image.height)));
        }
        let mask = read_mask(&dir.join(format!("mask_{v}.png")), "mask", w, h)?;
        let depth = read_f32(&dir.join(format!("depth_{v}.bin")), "depth", w * h)?;
        let normals = read_f32(&dir.join(format!("normal_{v}.bin")), "normal", w * h * 3)?;
        let depth = DepthMap::new(w, h, depth, mask.clone()).map_err(|e| Error::field("depth", e))?;
        let normals = NormalMap::new(w, h, normals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(), frame, mask)?;
        let pointmap = unproject_depth_to_pointmap(&depth, &intrinsics, frame)?;
        views.push(ViewData { image, depth, normals, pointmap, intrinsics, pose });
    }
    let matches = read_matches(&dir.join("matches.bin"))?;
    let n = (w * h) as u32;
    if matches.pairs.iter().any(|(a, b)| *a >= n || *b >= n) {
        return Err(Error::field("matches", "pixel index out of range"));
    }
    let [v0, v1]: [ViewData; 2] = views.try_into().expect("two views");
    Ok(ViewPairSample { seed: meta.seed, views: [v0, v1], matches })
}

/// Sample directory name for dataset index `i`.
pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:05}")
}

/// Sub-directories of `root` containing a `meta.json`, sorted by name.
pub fn list_sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pairgeo_core::synth::{generate_sample, SampleConfig};

    #[test]
    fn round_trip_is_bitwise() {
        let s = generate_sample(3, &SampleConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sample(&s, dir.path()).unwrap();
        assert_eq!(read_sample(dir.path()).unwrap(), s);
    }

    #[test]
    fn truncated_depth_names_the_field() {
        let s = generate_sample(1, &SampleConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sample(&s, dir.path()).unwrap();
        let p = dir.path().join("depth_1.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_sample(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Field { field, .. } if field == "depth"), "{err}");
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let s = generate_sample(2, &SampleConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sample(&s, dir.path()).unwrap();
        let p = dir.path().join("meta.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_sample(dir.path()), Err(Error::SchemaVersion { found: 7, .. })));
    }
}
