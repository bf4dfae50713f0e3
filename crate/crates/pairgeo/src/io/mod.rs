//! On-disk formats: sample directories, checkpoints, inference outputs and
//! PLY point clouds. All floating-point payloads are little-endian float32.

pub mod checkpoint;
pub mod outputs;
pub mod ply;
pub mod sample;

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use pairgeo_core::geometry::Mask;
use pairgeo_core::synth::Image;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect()
}

/// Reads exactly `count` float32 values of field `field` from `path`.
pub(crate) fn read_f32(path: &Path, field: &str, count: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::field(field, format!("{}: {e}", path.display())))?;
    if bytes.len() != 4 * count {
        return Err(Error::field(field, format!("expected {} bytes, found {}", 4 * count, bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::field(path.display().to_string(), e))?;
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path, field: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::field(field, format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::field(field, e))
}

/// Writes an image with values in [0, 1] as 8-bit RGB.
pub fn write_png_rgb(path: &Path, img: &Image) -> Result<()> {
    let data = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, data).expect("buffer sized from image");
    buf.save(path).map_err(|e| Error::field(path.display().to_string(), e))
}

/// Reads any PNG as RGB with values `k / 255`.
pub fn read_png_rgb(path: &Path, field: &str) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::field(field, format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|k| (k as f64 / 255.0) as f32).collect();
    Ok(Image::new(w as usize, h as usize, data)?)
}

pub(crate) fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data).expect("buffer sized from mask");
    buf.save(path).map_err(|e| Error::field(path.display().to_string(), e))
}

pub(crate) fn read_mask(path: &Path, field: &str, width: usize, height: usize) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::field(field, format!("{}: {e}", path.display())))?.to_luma8();
    if img.dimensions() != (width as u32, height as u32) {
        return Err(Error::field(field, format!("expected {width}x{height}, found {:?}", img.dimensions())));
    }
    Ok(Mask::new(width, height, img.into_raw().into_iter().map(|v| v >= 128).collect())?)
}

pub(crate) fn write_gray(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let buf = GrayImage::from_raw(width as u32, height as u32, data).expect("buffer sized by caller");
    buf.save(path).map_err(|e| Error::field(path.display().to_string(), e))
}
