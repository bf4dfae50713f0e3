//! Pinhole geometry on dense per-pixel maps.
//!
//! Pixel `(u, v)` is column `u`, row `v`, and maps are stored row-major, so
//! the flat index of a pixel is `v * width + u`. Camera frames are x right,
//! y down, z forward; poses are camera-to-world.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cross, dot, norm, scale, sub};
use crate::prelude::*;
use crate::sim3::SimilarityTransform;

pub type Vec3 = [f64; 3];

/// The coordinate frame a map is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Frame {
    View(u32),
    World,
}

impl core::fmt::Display for Frame {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Frame::View(v) => write!(f, "view {v}"),
            Frame::World => f.write_str("world"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidConfig(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        Some((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Intrinsics for an image subsampled by an integer `factor`
    /// (pixel `k` of the result is pixel `k * factor` of the source).
    pub fn subsampled(&self, factor: usize) -> Self {
        let f = factor as f64;
        CameraIntrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(RigidPose { rotation, translation })
    }

    /// Camera placed at `eye` looking at `target`, with image rows running
    /// along the projection of `down` onto the image plane.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::Degenerate("look_at eye coincides with target"));
        }
        let z = forward.normalize();
        let x = down.cross(&z);
        if x.norm() < 1e-9 {
            return Err(Error::Degenerate("look_at down vector parallel to viewing direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Ok(RigidPose { rotation, translation: eye })
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidPose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let q = self.rotation * Vector3::from(p) + self.translation;
        [q[0], q[1], q[2]]
    }

    pub fn rotate(&self, n: Vec3) -> Vec3 {
        let q = self.rotation * Vector3::from(n);
        [q[0], q[1], q[2]]
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        RigidPose::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// Transform taking points in this camera's frame to `dst`'s frame.
    pub fn relative_to(&self, dst: &RigidPose) -> RigidPose {
        dst.inverse().compose(self)
    }
}

pub(crate) fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= 1e-6) || !((r.determinant() - 1.0).abs() <= 1e-6) {
        return Err(Error::InvalidConfig(format!(
            "rotation is not orthonormal with det +1 (orthogonality error {err:.3e})"
        )));
    }
    Ok(())
}

/// A view's frame tag together with its camera-to-world pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosedFrame {
    pub frame: Frame,
    pub pose: RigidPose,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape("mask", width * height, bits.len()));
        }
        Ok(Mask { width, height, bits })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask { width, height, bits: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn set(&mut self, idx: usize, value: bool) {
        self.bits[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape("mask intersection", (self.width, self.height), (other.width, other.height)));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pointmap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vec3>,
    pub frame: Frame,
    pub mask: Mask,
}

impl Pointmap {
    pub fn new(width: usize, height: usize, points: Vec<Vec3>, frame: Frame, mask: Mask) -> Result<Self> {
        if points.len() != width * height {
            return Err(Error::shape("pointmap", width * height, points.len()));
        }
        if (mask.width, mask.height) != (width, height) {
            return Err(Error::shape("pointmap mask", (width, height), (mask.width, mask.height)));
        }
        Ok(Pointmap { width, height, points, frame, mask })
    }

    pub fn scaled(&self, s: f64) -> Pointmap {
        Pointmap { points: self.points.iter().map(|p| scale(*p, s)).collect(), ..self.clone() }
    }

    pub fn with_mask(&self, mask: Mask) -> Result<Pointmap> {
        Pointmap::new(self.width, self.height, self.points.clone(), self.frame, mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub mask: Mask,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, mask: Mask) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::shape("depth map", width * height, depth.len()));
        }
        if (mask.width, mask.height) != (width, height) {
            return Err(Error::shape("depth mask", (width, height), (mask.width, mask.height)));
        }
        Ok(DepthMap { width, height, depth, mask })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vec3>,
    pub frame: Frame,
    pub mask: Mask,
}

impl NormalMap {
    pub fn new(width: usize, height: usize, normals: Vec<Vec3>, frame: Frame, mask: Mask) -> Result<Self> {
        if normals.len() != width * height {
            return Err(Error::shape("normal map", width * height, normals.len()));
        }
        if (mask.width, mask.height) != (width, height) {
            return Err(Error::shape("normal mask", (width, height), (mask.width, mask.height)));
        }
        Ok(NormalMap { width, height, normals, frame, mask })
    }
}

pub fn unproject_depth_to_pointmap(depth: &DepthMap, k: &CameraIntrinsics, frame: Frame) -> Result<Pointmap> {
    if (depth.width, depth.height) != (k.width, k.height) {
        return Err(Error::shape("depth vs intrinsics resolution", (k.width, k.height), (depth.width, depth.height)));
    }
    if !(k.fx > 0.0 && k.fy > 0.0) {
        return Err(Error::InvalidConfig(format!("non-positive focal length fx={} fy={}", k.fx, k.fy)));
    }
    let mut points = Vec::with_capacity(depth.depth.len());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.depth[v * depth.width + u];
            points.push([(u as f64 - k.cx) * d / k.fx, (v as f64 - k.cy) * d / k.fy, d]);
        }
    }
    Pointmap::new(depth.width, depth.height, points, frame, depth.mask.clone())
}

/// Depth is the z channel of a pointmap expressed in its own camera frame.
/// `local` names the frame the caller considers local to this view.
pub fn pointmap_to_depth(pm: &Pointmap, local: Frame) -> Result<DepthMap> {
    if pm.frame != local {
        return Err(Error::FrameMismatch { expected: local.to_string(), got: pm.frame.to_string() });
    }
    let depth: Vec<f64> = pm.points.iter().map(|p| p[2]).collect();
    let bits = pm.mask.bits.iter().zip(&depth).map(|(m, d)| *m && *d > 0.0).collect();
    DepthMap::new(pm.width, pm.height, depth, Mask::new(pm.width, pm.height, bits)?)
}

pub fn transform_pointmap(pm: &Pointmap, src: &PosedFrame, dst: &PosedFrame) -> Result<Pointmap> {
    if pm.frame != src.frame {
        return Err(Error::FrameMismatch { expected: src.frame.to_string(), got: pm.frame.to_string() });
    }
    let rel = src.pose.relative_to(&dst.pose);
    let points =
        pm.points.iter().zip(pm.mask.bits.iter()).map(|(p, valid)| if *valid { rel.apply(*p) } else { *p }).collect();
    Pointmap::new(pm.width, pm.height, points, dst.frame, pm.mask.clone())
}

/// Rotates normals into another view's frame, then re-orients each one to
/// face that view's camera using the matching point in `points_dst`.
pub fn transform_normals(normals: &NormalMap, rotation: &Matrix3<f64>, points_dst: &Pointmap) -> Result<NormalMap> {
    if (normals.width, normals.height) != (points_dst.width, points_dst.height) {
        return Err(Error::shape(
            "normals vs pointmap",
            (normals.width, normals.height),
            (points_dst.width, points_dst.height),
        ));
    }
    let out = normals
        .normals
        .iter()
        .zip(&points_dst.points)
        .map(|(n, p)| {
            let r = rotation * Vector3::from(*n);
            let r = [r[0], r[1], r[2]];
            if dot(r, *p) > 0.0 {
                scale(r, -1.0)
            } else {
                r
            }
        })
        .collect();
    NormalMap::new(normals.width, normals.height, out, points_dst.frame, normals.mask.and(&points_dst.mask)?)
}

/// Difference stencil for one pixel: tangent along x is `p[x.0] - p[x.1]`,
/// along y is `p[y.0] - p[y.1]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub x: (usize, usize),
    pub y: (usize, usize),
}

fn axis_pair(mask: &Mask, idx: usize, pos: usize, len: usize, step: usize) -> Option<(usize, usize)> {
    let prev = (pos > 0 && mask.bits[idx - step]).then(|| idx - step);
    let next = (pos + 1 < len && mask.bits[idx + step]).then(|| idx + step);
    match (next, prev) {
        (Some(n), Some(p)) => Some((n, p)),
        (Some(n), None) => Some((n, idx)),
        (None, Some(p)) => Some((idx, p)),
        (None, None) => None,
    }
}

pub(crate) fn stencil(mask: &Mask, idx: usize) -> Option<Stencil> {
    if !mask.bits[idx] {
        return None;
    }
    let (u, v) = (idx % mask.width, idx / mask.width);
    Some(Stencil { x: axis_pair(mask, idx, u, mask.width, 1)?, y: axis_pair(mask, idx, v, mask.height, mask.width)? })
}

/// Relative threshold on `|tx × ty| / (|tx| |ty|)` below which tangents are
/// treated as collinear.
const DEGENERATE_SINE: f64 = 1e-9;

/// Raw cross product, its norm and orientation sign for one pixel.
pub(crate) fn pixel_normal(points: &[Vec3], idx: usize, st: Stencil) -> Option<(Vec3, f64, f64)> {
    let tx = sub(points[st.x.0], points[st.x.1]);
    let ty = sub(points[st.y.0], points[st.y.1]);
    let c = cross(tx, ty);
    let len = norm(c);
    let scale_ref = norm(tx) * norm(ty);
    if !(len > DEGENERATE_SINE * scale_ref) || !len.is_finite() {
        return None;
    }
    let sign = if dot(c, points[idx]) > 0.0 { -1.0 } else { 1.0 };
    Some((c, len, sign))
}

/// Surface normals from a pointmap via central differences (one-sided at
/// borders and next to invalid pixels), oriented towards the camera.
pub fn normals_from_pointmap(pm: &Pointmap) -> Result<NormalMap> {
    if pm.mask.count() == 0 {
        return Err(Error::EmptyValidSet("pointmap for normal estimation"));
    }
    let n = pm.width * pm.height;
    let mut normals = vec![[0.0; 3]; n];
    let mut bits = vec![false; n];
    for idx in 0..n {
        let Some(st) = stencil(&pm.mask, idx) else { continue };
        if let Some((c, len, sign)) = pixel_normal(&pm.points, idx, st) {
            normals[idx] = scale(c, sign / len);
            bits[idx] = true;
        }
    }
    NormalMap::new(pm.width, pm.height, normals, pm.frame, Mask::new(pm.width, pm.height, bits)?)
}

/// Backpropagates `grad_normals` (dL/dn per pixel, zero where ignored)
/// through [`normals_from_pointmap`] into `grad_points`.
pub fn normals_from_pointmap_backward(pm: &Pointmap, grad_normals: &[Vec3], grad_points: &mut [Vec3]) {
    for idx in 0..pm.points.len() {
        let g = grad_normals[idx];
        if g == [0.0; 3] {
            continue;
        }
        let Some(st) = stencil(&pm.mask, idx) else { continue };
        let Some((c, len, sign)) = pixel_normal(&pm.points, idx, st) else { continue };
        // n = sign * c / |c|  =>  dL/dc = sign * (g - n̂ (n̂·g)) / |c|
        let nh = scale(c, 1.0 / len);
        let proj = dot(nh, g);
        let gc = scale(sub(g, scale(nh, proj)), sign / len);
        let tx = sub(pm.points[st.x.0], pm.points[st.x.1]);
        let ty = sub(pm.points[st.y.0], pm.points[st.y.1]);
        let gtx = cross(ty, gc);
        let gty = cross(gc, tx);
        for k in 0..3 {
            grad_points[st.x.0][k] += gtx[k];
            grad_points[st.x.1][k] -= gtx[k];
            grad_points[st.y.0][k] += gty[k];
            grad_points[st.y.1][k] -= gty[k];
        }
    }
}

/// Mean distance to the origin over the valid points of both maps.
pub fn norm_factor(pm1: &Pointmap, pm2: &Pointmap) -> Result<f64> {
    if pm1.frame != pm2.frame {
        return Err(Error::FrameMismatch { expected: pm1.frame.to_string(), got: pm2.frame.to_string() });
    }
    norm_factor_masked(&[(&pm1.points, &pm1.mask), (&pm2.points, &pm2.mask)])
}

pub(crate) fn norm_factor_masked(maps: &[(&[Vec3], &Mask)]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (points, mask) in maps {
        for idx in mask.valid_indices() {
            sum += norm(points[idx]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyValidSet("normalization factor"));
    }
    let z = sum / count as f64;
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Degenerate("normalization factor is zero or non-finite"));
    }
    Ok(z)
}

/// Least-squares pinhole fit from a local pointmap. With
/// `fix_principal_point` the principal point is pinned to the image centre
/// `(width / 2, height / 2)` and only the focal lengths are fitted.
pub fn recover_intrinsics_from_pointmap(pm: &Pointmap, fix_principal_point: bool) -> Result<CameraIntrinsics> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for idx in pm.mask.valid_indices() {
        let p = pm.points[idx];
        if p[2] > 0.0 && p.iter().all(|c| c.is_finite()) {
            let (u, v) = ((idx % pm.width) as f64, (idx / pm.width) as f64);
            xs.push((p[0] / p[2], u));
            ys.push((p[1] / p[2], v));
        }
    }
    if xs.len() < 10 {
        return Err(Error::InsufficientMatches { needed: 10, got: xs.len() });
    }
    let (fx, cx) = fit_axis(&xs, fix_principal_point.then_some(pm.width as f64 / 2.0))?;
    let (fy, cy) = fit_axis(&ys, fix_principal_point.then_some(pm.height as f64 / 2.0))?;
    CameraIntrinsics::new(fx, fy, cx, cy, pm.width, pm.height)
}

/// Fits `pix = f * a + c` in the least-squares sense.
fn fit_axis(samples: &[(f64, f64)], fixed_c: Option<f64>) -> Result<(f64, f64)> {
    let n = samples.len() as f64;
    match fixed_c {
        Some(c) => {
            let saa: f64 = samples.iter().map(|(a, _)| a * a).sum();
            let sap: f64 = samples.iter().map(|(a, p)| a * (p - c)).sum();
            if saa <= 1e-12 * n {
                return Err(Error::Degenerate("all points lie on the principal ray"));
            }
            Ok((sap / saa, c))
        }
        None => {
            let ma = samples.iter().map(|(a, _)| a).sum::<f64>() / n;
            let mp = samples.iter().map(|(_, p)| p).sum::<f64>() / n;
            let saa: f64 = samples.iter().map(|(a, _)| (a - ma) * (a - ma)).sum();
            let sap: f64 = samples.iter().map(|(a, p)| (a - ma) * (p - mp)).sum();
            if saa <= 1e-12 * n {
                return Err(Error::Degenerate("all points lie on one ray"));
            }
            let f = sap / saa;
            Ok((f, mp - f * ma))
        }
    }
}

/// Closed-form Kabsch/Umeyama fit of `dst ≈ s R src + t`. Returns the
/// transform and the RMS residual.
pub fn relative_pose_procrustes(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<(SimilarityTransform, f64)> {
    weighted_procrustes(src, dst, None, with_scale)
}

pub(crate) fn weighted_procrustes(
    src: &[Vec3],
    dst: &[Vec3],
    weights: Option<&[f64]>,
    with_scale: bool,
) -> Result<(SimilarityTransform, f64)> {
    if src.len() != dst.len() {
        return Err(Error::shape("procrustes point lists", src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(Error::InsufficientMatches { needed: 3, got: src.len() });
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let wsum: f64 = (0..src.len()).map(w).sum();
    let mut mu_s = Vector3::zeros();
    let mut mu_d = Vector3::zeros();
    for i in 0..src.len() {
        mu_s += Vector3::from(src[i]) * w(i);
        mu_d += Vector3::from(dst[i]) * w(i);
    }
    mu_s /= wsum;
    mu_d /= wsum;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for i in 0..src.len() {
        let a = Vector3::from(src[i]) - mu_s;
        let b = Vector3::from(dst[i]) - mu_d;
        cov += b * a.transpose() * w(i);
        src_cov += a * a.transpose() * w(i);
        var_s += a.norm_squared() * w(i);
    }
    cov /= wsum;
    src_cov /= wsum;
    var_s /= wsum;

    let spread = src_cov.symmetric_eigenvalues();
    let mut ev = [spread[0], spread[1], spread[2]];
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("correspondences are collinear"));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("svd u"), svd.v_t.expect("svd v_t"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let s = if with_scale {
        let sv = svd.singular_values;
        (sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)]) / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * s;
    let sim = SimilarityTransform { scale: s, rotation, translation };

    let mut sq = 0.0;
    for i in 0..src.len() {
        let r = sub(sim.apply(src[i]), dst[i]);
        sq += dot(r, r) * w(i);
    }
    Ok((sim, (sq / wsum).sqrt()))
}
