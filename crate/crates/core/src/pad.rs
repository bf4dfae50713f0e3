//! Zero padding to a patch multiple and cropping predictions back.

use crate::error::Result;
use crate::geometry::{DepthMap, Mask, NormalMap, Pointmap};
use crate::model::{DescriptorMap, HeadOutputs};
use crate::prelude::*;
use crate::synth::Image;

/// Size of an image before padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OriginalSize {
    pub width: usize,
    pub height: usize,
}

/// Pads right and bottom with zeros up to the next multiple of `patch`.
pub fn pad_to_patch_multiple(image: &Image, patch: usize) -> (Image, OriginalSize) {
    let orig = OriginalSize { width: image.width, height: image.height };
    let up = |x: usize| x.div_ceil(patch) * patch;
    let (w, h) = (up(image.width), up(image.height));
    if (w, h) == (image.width, image.height) {
        return (image.clone(), orig);
    }
    let mut data = vec![0.0f32; w * h * 3];
    for y in 0..image.height {
        let src = &image.data[y * image.width * 3..(y + 1) * image.width * 3];
        data[y * w * 3..y * w * 3 + image.width * 3].copy_from_slice(src);
    }
    (Image { width: w, height: h, data }, orig)
}

fn crop_rows<T: Copy>(data: &[T], width: usize, channels: usize, to: OriginalSize) -> Vec<T> {
    let mut out = Vec::with_capacity(to.width * to.height * channels);
    for y in 0..to.height {
        let start = y * width * channels;
        out.extend_from_slice(&data[start..start + to.width * channels]);
    }
    out
}

fn crop_mask(mask: &Mask, to: OriginalSize) -> Result<Mask> {
    Mask::new(to.width, to.height, crop_rows(mask.bits(), mask.width(), 1, to))
}

/// Crops every map of `out` to the top-left `to` region.
pub fn crop_outputs(out: &HeadOutputs, to: OriginalSize) -> Result<HeadOutputs> {
    let w = out.width();
    let crop_pm = |pm: &Pointmap| -> Result<Pointmap> {
        Pointmap::new(to.width, to.height, crop_rows(&pm.points, w, 1, to), pm.frame, crop_mask(&pm.mask, to)?)
    };
    Ok(HeadOutputs {
        pointmap_local: crop_pm(&out.pointmap_local)?,
        pointmap_cross: crop_pm(&out.pointmap_cross)?,
        normals: NormalMap::new(
            to.width,
            to.height,
            crop_rows(&out.normals.normals, w, 1, to),
            out.normals.frame,
            crop_mask(&out.normals.mask, to)?,
        )?,
        depth: DepthMap::new(
            to.width,
            to.height,
            crop_rows(&out.depth.depth, w, 1, to),
            crop_mask(&out.depth.mask, to)?,
        )?,
        descriptors: DescriptorMap::new(
            to.width,
            to.height,
            out.descriptors.dim,
            crop_rows(&out.descriptors.data, w, out.descriptors.dim, to),
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiples_are_unchanged() {
        let img = Image::zeros(64, 64);
        let (p, o) = pad_to_patch_multiple(&img, 16);
        assert_eq!(p, img);
        assert_eq!(o, OriginalSize { width: 64, height: 64 });
    }

    #[test]
    fn pads_to_next_multiple() {
        let img = Image::new(65, 64, vec![0.5; 65 * 64 * 3]).unwrap();
        let (p, o) = pad_to_patch_multiple(&img, 16);
        assert_eq!((p.width, p.height), (80, 64));
        assert_eq!((o.width, o.height), (65, 64));
        assert_eq!(p.pixel(64), [0.5; 3]);
        assert_eq!(p.pixel(65), [0.0; 3]);
    }
}
