//! Training objectives with analytic gradients.
//!
//! Regression terms reduce by the mean over valid pixels, so values do not
//! depend on resolution. Validity always comes from the ground-truth masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normals_from_pointmap, normals_from_pointmap_backward, Mask, NormalMap, Pointmap, Vec3};
use crate::linalg::{matmul, matmul_a_bt, matmul_at_b, norm};
use crate::model::DescriptorMap;
use crate::prelude::*;
use crate::synth::CorrespondenceSet;

pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageWeights {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for StageWeights {
    fn default() -> Self {
        StageWeights { eta1: 1.0, eta2: 0.1, eta3: 0.075, lambda1: 1.0, lambda2: 0.1, lambda3: 1.0 }
    }
}

impl StageWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.eta1, self.eta2, self.eta3, self.lambda1, self.lambda2, self.lambda3];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("stage weights must be finite and non-negative, got {all:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    /// `s(i, j) = exp(τ ⟨d_i, d_j⟩)`.
    SimilarityPositive,
    /// `s(i, j) = exp(-τ ⟨d_i, d_j⟩)`.
    PaperNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchLossConfig {
    pub tau: f64,
    pub sign_convention: SignConvention,
    pub max_correspondences: usize,
}

impl Default for MatchLossConfig {
    fn default() -> Self {
        MatchLossConfig { tau: 10.0, sign_convention: SignConvention::SimilarityPositive, max_correspondences: 1024 }
    }
}

impl MatchLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 300.0) {
            return Err(Error::InvalidConfig(format!("match tau must lie in (0, 300], got {}", self.tau)));
        }
        if self.max_correspondences == 0 {
            return Err(Error::InvalidConfig("max_correspondences must be >= 1".into()));
        }
        Ok(())
    }

    /// `±τ` depending on the sign convention.
    pub fn signed_tau(&self) -> f64 {
        match self.sign_convention {
            SignConvention::SimilarityPositive => self.tau,
            SignConvention::PaperNegative => -self.tau,
        }
    }
}

/// A loss value with its gradient with respect to the predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss<G> {
    pub value: f64,
    pub grad: G,
}

/// Both pointmaps of a view pair: `local[v]` is view `v` in its own frame,
/// `cross[v]` is view `v` in the other view's frame.
#[derive(Clone, Copy, Debug)]
pub struct PairPointmaps<'a> {
    pub local: [&'a Pointmap; 2],
    pub cross: [&'a Pointmap; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointmapGrads {
    pub local: [Vec<Vec3>; 2],
    pub cross: [Vec<Vec3>; 2],
}

impl PointmapGrads {
    fn zeros(maps: &PairPointmaps) -> Self {
        let z = |pm: &Pointmap| vec![[0.0; 3]; pm.points.len()];
        PointmapGrads { local: [z(maps.local[0]), z(maps.local[1])], cross: [z(maps.cross[0]), z(maps.cross[1])] }
    }
}

fn check_pair(pred: &PairPointmaps, gt: &PairPointmaps) -> Result<()> {
    for v in 0..2 {
        for (p, g) in [(pred.local[v], gt.local[v]), (pred.cross[v], gt.cross[v])] {
            if (p.width, p.height) != (g.width, g.height) || p.points.len() != g.points.len() {
                return Err(Error::shape("prediction vs ground truth", (g.width, g.height), (p.width, p.height)));
            }
        }
        for maps in [pred, gt] {
            if maps.cross[v].frame != maps.local[1 - v].frame {
                return Err(Error::FrameMismatch {
                    expected: maps.local[1 - v].frame.to_string(),
                    got: maps.cross[v].frame.to_string(),
                });
            }
        }
    }
    Ok(())
}

/// Which slots of a [`PairPointmaps`] live in frame `f` (view index):
/// the local map of `f` and the cross map of the other view.
fn frame_members(f: usize) -> [(bool, usize); 2] {
    [(false, f), (true, 1 - f)]
}

fn slot<'a, T>(local: &'a [T; 2], cross: &'a [T; 2], is_cross: bool, v: usize) -> &'a T {
    if is_cross {
        &cross[v]
    } else {
        &local[v]
    }
}

/// Mean distance to the origin over the GT-valid points of frame `f`.
fn frame_norm(maps: &PairPointmaps, gt: &PairPointmaps, f: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (is_cross, v) in frame_members(f) {
        let pm = slot(&maps.local, &maps.cross, is_cross, v);
        let mask = &slot(&gt.local, &gt.cross, is_cross, v).mask;
        for i in mask.valid_indices() {
            sum += norm(pm.points[i]);
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

fn frame_norm_backward(pred: &PairPointmaps, gt: &PairPointmaps, f: usize, dz: f64, grad: &mut PointmapGrads) {
    let count: usize = frame_members(f).iter().map(|(c, v)| slot(&gt.local, &gt.cross, *c, *v).mask.count()).sum();
    for (is_cross, v) in frame_members(f) {
        let pm = slot(&pred.local, &pred.cross, is_cross, v);
        let mask = &slot(&gt.local, &gt.cross, is_cross, v).mask;
        let g = if is_cross { &mut grad.cross[v] } else { &mut grad.local[v] };
        for i in mask.valid_indices() {
            let p = pm.points[i];
            let n = norm(p);
            if n > 0.0 {
                for k in 0..3 {
                    g[i][k] += dz * p[k] / (n * count as f64);
                }
            }
        }
    }
}

/// `mean_i ‖p_i / z − q_i / z̄‖` over `mask`; returns the value, accumulates
/// `∂/∂p_i` into `grad` and returns `∂/∂z`.
fn normalized_distance(
    pred: &[Vec3],
    gt: &[Vec3],
    mask: &Mask,
    z: f64,
    zbar: f64,
    grad: &mut [Vec3],
) -> Result<(f64, f64)> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyValidSet("pointmap regression"));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut dz = 0.0;
    for i in mask.valid_indices() {
        let a = [pred[i][0] / z - gt[i][0] / zbar, pred[i][1] / z - gt[i][1] / zbar, pred[i][2] / z - gt[i][2] / zbar];
        let r = norm(a);
        total += r;
        if r > 0.0 {
            for k in 0..3 {
                let u = a[k] / r;
                grad[i][k] += inv_n * u / z;
                dz -= inv_n * u * pred[i][k] / (z * z);
            }
        }
    }
    Ok((total * inv_n, dz))
}

fn pts_regression(pred: &PairPointmaps, gt: &PairPointmaps, cross: bool) -> Result<Loss<PointmapGrads>> {
    check_pair(pred, gt)?;
    let z = [frame_norm(pred, gt, 0)?, frame_norm(pred, gt, 1)?];
    let zbar = [frame_norm(gt, gt, 0)?, frame_norm(gt, gt, 1)?];
    let mut grad = PointmapGrads::zeros(pred);
    let mut value = 0.0;
    let mut dz = [0.0; 2];
    for v in 0..2 {
        let f = if cross { 1 - v } else { v };
        let (p, g) = (slot(&pred.local, &pred.cross, cross, v), slot(&gt.local, &gt.cross, cross, v));
        let gslot = if cross { &mut grad.cross[v] } else { &mut grad.local[v] };
        let (val, d) = normalized_distance(&p.points, &g.points, &g.mask, z[f], zbar[f], gslot)?;
        value += val;
        dz[f] += d;
    }
    for f in 0..2 {
        frame_norm_backward(pred, gt, f, dz[f], &mut grad);
    }
    Ok(Loss { value, grad })
}

/// Scale-normalized regression of each view's own-frame pointmap, summed
/// over both views. The factor of frame `v` averages the point norms of
/// every map expressed in frame `v` (the local map of `v` and the cross map
/// of the other view), separately for prediction and ground truth.
pub fn loss_pts_local(pred: &PairPointmaps, gt: &PairPointmaps) -> Result<Loss<PointmapGrads>> {
    pts_regression(pred, gt, false)
}

/// As [`loss_pts_local`] for the cross-frame pointmaps, each normalized by
/// the factor of its target frame.
pub fn loss_pts_global(pred: &PairPointmaps, gt: &PairPointmaps) -> Result<Loss<PointmapGrads>> {
    pts_regression(pred, gt, true)
}

/// Mean L1 distance between `gt` normals and `pred` over pixels valid in
/// both; returns the value and `∂/∂pred` (zero elsewhere).
fn normal_l1(pred: &NormalMap, gt: &NormalMap) -> Result<(f64, Vec<Vec3>)> {
    if pred.normals.len() != gt.normals.len() {
        return Err(Error::shape("normal maps", gt.normals.len(), pred.normals.len()));
    }
    let mask = pred.mask.and(&gt.mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyValidSet("normal loss"));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![[0.0; 3]; pred.normals.len()];
    let mut total = 0.0;
    for i in mask.valid_indices() {
        for k in 0..3 {
            let d = pred.normals[i][k] - gt.normals[i][k];
            total += d.abs();
            grad[i][k] = if d > 0.0 {
                inv_n
            } else if d < 0.0 {
                -inv_n
            } else {
                0.0
            };
        }
    }
    Ok((total * inv_n, grad))
}

/// Ground-truth normals of both views in their own frame (`local`) and in
/// the other view's frame (`cross`).
#[derive(Clone, Copy, Debug)]
pub struct PairNormals<'a> {
    pub local: [&'a NormalMap; 2],
    pub cross: [&'a NormalMap; 2],
}

/// L1 between ground-truth normals and normals derived by finite
/// differences from the predicted pointmaps, own frame plus cross frame,
/// summed over both views. Predicted points are read under the GT masks.
pub fn loss_pts_normal(pred: &PairPointmaps, gt_normals: &PairNormals) -> Result<Loss<PointmapGrads>> {
    let mut grad = PointmapGrads::zeros(pred);
    let mut value = 0.0;
    for v in 0..2 {
        for is_cross in [false, true] {
            let pm = slot(&pred.local, &pred.cross, is_cross, v);
            let gt = slot(&gt_normals.local, &gt_normals.cross, is_cross, v);
            let masked = pm.with_mask(gt.mask.clone())?;
            if masked.mask.count() == 0 {
                return Err(Error::EmptyValidSet("pointmap normal loss"));
            }
            let derived = normals_from_pointmap(&masked)?;
            let (val, gn) = normal_l1(&derived, gt)?;
            value += val;
            let g = if is_cross { &mut grad.cross[v] } else { &mut grad.local[v] };
            normals_from_pointmap_backward(&masked, &gn, g);
        }
    }
    Ok(Loss { value, grad })
}

/// L1 between the normal head output and own-frame GT normals, summed over
/// both views.
pub fn loss_normal_direct(pred: [&NormalMap; 2], gt: [&NormalMap; 2]) -> Result<Loss<[Vec<Vec3>; 2]>> {
    let (v0, g0) = normal_l1(pred[0], gt[0])?;
    let (v1, g1) = normal_l1(pred[1], gt[1])?;
    Ok(Loss { value: v0 + v1, grad: [g0, g1] })
}

/// Evenly strided subset of at most `cap` matches.
pub fn sample_matches(matches: &CorrespondenceSet, cap: usize) -> Vec<(u32, u32)> {
    let k = matches.len();
    if k <= cap {
        return matches.pairs.clone();
    }
    (0..cap).map(|m| matches.pairs[m * k / cap]).collect()
}

/// Two-sided infoNCE over the sampled matches, using the other sampled
/// matches as negatives. Normalized by the number of sampled matches.
/// Gradients are with respect to the (already normalized) descriptors.
pub fn loss_match_infonce(
    desc1: &DescriptorMap,
    desc2: &DescriptorMap,
    matches: &CorrespondenceSet,
    cfg: &MatchLossConfig,
) -> Result<Loss<[Vec<f64>; 2]>> {
    cfg.validate()?;
    if desc1.dim != desc2.dim {
        return Err(Error::shape("descriptor dim", desc1.dim, desc2.dim));
    }
    let sampled = sample_matches(matches, cfg.max_correspondences);
    if sampled.is_empty() {
        return Err(Error::InsufficientMatches { needed: 1, got: 0 });
    }
    let (n1, n2) = (desc1.width * desc1.height, desc2.width * desc2.height);
    for &(i, j) in &sampled {
        if i as usize >= n1 || j as usize >= n2 {
            return Err(Error::shape("match pixel index", (n1, n2), (i, j)));
        }
        for (d, p) in [(desc1, i), (desc2, j)] {
            let nrm = d.get(p as usize).iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((nrm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
                return Err(Error::NonUnitDescriptor { pixel: p as usize, norm: nrm });
            }
        }
    }
    let k = sampled.len();
    let st = cfg.signed_tau();
    let dim = desc1.dim;
    let gather = |d: &DescriptorMap, side: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(k * dim);
        for p in &sampled {
            out.extend_from_slice(d.get(if side == 0 { p.0 } else { p.1 } as usize));
        }
        out
    };
    let (a1, a2) = (gather(desc1, 0), gather(desc2, 1));
    let mut s = vec![0.0; k * k];
    matmul_a_bt(&a1, &a2, &mut s, k, dim, k, false);
    s.iter_mut().for_each(|x| *x *= st);
    // Unit descriptors bound every entry by |τ|, so one shift keeps exp in range.
    let shift = st.abs();
    let e: Vec<f64> = s.iter().map(|x| (x - shift).exp()).collect();
    let mut col_sum = vec![0.0; k];
    let mut row_sum = vec![0.0; k];
    for a in 0..k {
        for b in 0..k {
            row_sum[a] += e[a * k + b];
            col_sum[b] += e[a * k + b];
        }
    }
    let mut total = 0.0;
    for m in 0..k {
        let d = s[m * k + m] - shift;
        total += (col_sum[m].ln() - d) + (row_sum[m].ln() - d);
    }
    let inv_k = 1.0 / k as f64;
    let inv_col: Vec<f64> = col_sum.iter().map(|x| 1.0 / x).collect();
    let mut ds = vec![0.0; k * k];
    for a in 0..k {
        let inv_row = 1.0 / row_sum[a];
        for b in 0..k {
            let mut v = e[a * k + b] * (inv_col[b] + inv_row);
            if a == b {
                v -= 2.0;
            }
            ds[a * k + b] = v * inv_k * st;
        }
    }
    let mut ga1 = vec![0.0; k * dim];
    let mut ga2 = vec![0.0; k * dim];
    matmul(&ds, &a2, &mut ga1, k, k, dim, false);
    matmul_at_b(&ds, &a1, &mut ga2, k, k, dim, false);
    let mut g1 = vec![0.0; desc1.data.len()];
    let mut g2 = vec![0.0; desc2.data.len()];
    for (m, &(i, j)) in sampled.iter().enumerate() {
        let (i, j) = (i as usize, j as usize);
        for c in 0..dim {
            g1[i * dim + c] += ga1[m * dim + c];
            g2[j * dim + c] += ga2[m * dim + c];
        }
    }
    Ok(Loss { value: total * inv_k, grad: [g1, g2] })
}

/// Scale-invariant L1 on log depth: `mean |r_i − mean(r)|` with
/// `r = log d̂ − log d` over valid pixels. Gradient is with respect to `d̂`.
pub fn loss_depth_log_si(pred: &[f64], gt: &[f64], mask: &Mask) -> Result<Loss<Vec<f64>>> {
    if pred.len() != gt.len() || gt.len() != mask.bits().len() {
        return Err(Error::shape("depth maps", gt.len(), pred.len()));
    }
    let idx: Vec<usize> = mask.valid_indices().collect();
    if idx.is_empty() {
        return Err(Error::EmptyValidSet("depth loss"));
    }
    for &i in &idx {
        if !(pred[i] > 0.0 && gt[i] > 0.0) {
            return Err(Error::NonFinite(format!("non-positive depth at pixel {i}")));
        }
    }
    let n = idx.len() as f64;
    let r: Vec<f64> = idx.iter().map(|&i| pred[i].ln() - gt[i].ln()).collect();
    let mean = r.iter().sum::<f64>() / n;
    let sgn: Vec<f64> = r
        .iter()
        .map(|x| {
            let d = x - mean;
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let value = r.iter().map(|x| (x - mean).abs()).sum::<f64>() / n;
    let mean_sgn = sgn.iter().sum::<f64>() / n;
    let mut grad = vec![0.0; pred.len()];
    for (k, &i) in idx.iter().enumerate() {
        grad[i] = (sgn[k] - mean_sgn) / (n * pred[i]);
    }
    Ok(Loss { value, grad })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Components {
    pub pts_loc: f64,
    pub pts_glb: f64,
    pub pts_n: f64,
    pub matching: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Components {
    pub pts_loc: f64,
    pub pts_glb: f64,
    pub pts_n: f64,
    pub normal: f64,
}

fn check_finite(named: &[(&str, f64)]) -> Result<()> {
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component `{name}` is {v}")));
        }
    }
    Ok(())
}

/// `L_loc + η₁ L_glb + η₂ L_pts_n + η₃ L_match`.
pub fn stage1_objective(c: &Stage1Components, w: &StageWeights) -> Result<f64> {
    check_finite(&[("pts_loc", c.pts_loc), ("pts_glb", c.pts_glb), ("pts_n", c.pts_n), ("match", c.matching)])?;
    Ok(c.pts_loc + w.eta1 * c.pts_glb + w.eta2 * c.pts_n + w.eta3 * c.matching)
}

/// `L_loc + λ₁ L_glb + λ₂ L_pts_n + λ₃ L_n`.
pub fn stage2_objective(c: &Stage2Components, w: &StageWeights) -> Result<f64> {
    check_finite(&[("pts_loc", c.pts_loc), ("pts_glb", c.pts_glb), ("pts_n", c.pts_n), ("normal", c.normal)])?;
    Ok(c.pts_loc + w.lambda1 * c.pts_glb + w.lambda2 * c.pts_n + w.lambda3 * c.normal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;

    fn pm(points: Vec<Vec3>, w: usize, h: usize, v: u32, mask: Option<Vec<bool>>) -> Pointmap {
        let bits = mask.unwrap_or_else(|| vec![true; w * h]);
        Pointmap::new(w, h, points, Frame::View(v), Mask::new(w, h, bits).unwrap()).unwrap()
    }

    fn desc(rows: &[&[f64]]) -> DescriptorMap {
        let dim = rows[0].len();
        DescriptorMap::new(rows.len(), 1, dim, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn single_pixel_offset_matches_scalar_evaluation() {
        // one valid pixel per map, pred = gt + (1, 0, 0), gt = (0, 0, 1)
        let gt = pm(vec![[0.0, 0.0, 1.0]], 1, 1, 0, None);
        let pred = pm(vec![[1.0, 0.0, 1.0]], 1, 1, 0, None);
        let gt1 = pm(vec![[0.0, 0.0, 1.0]], 1, 1, 1, None);
        let pred1 = pm(vec![[1.0, 0.0, 1.0]], 1, 1, 1, None);
        let p = PairPointmaps { local: [&pred, &pred1], cross: [&pred1, &pred] };
        let g = PairPointmaps { local: [&gt, &gt1], cross: [&gt1, &gt] };
        let l = loss_pts_local(&p, &g).unwrap();
        // z = √2, z̄ = 1: |(1/√2, 0, 1/√2) − (0, 0, 1)| per view
        let z = 2f64.sqrt();
        let per_view = ((1.0 / z).powi(2) + (1.0 / z - 1.0).powi(2)).sqrt();
        assert!((l.value - 2.0 * per_view).abs() < 1e-12);
    }

    #[test]
    fn infonce_one_hot_closed_form() {
        let d1 = desc(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let m = CorrespondenceSet { pairs: vec![(0, 0), (1, 1)] };
        let cfg = MatchLossConfig { tau: 1.0, ..Default::default() };
        let l = loss_match_infonce(&d1, &d1, &m, &cfg).unwrap();
        let e = core::f64::consts::E;
        assert!((l.value - 2.0 * ((1.0 + e) / e).ln()).abs() < 1e-12);
        assert!((l.value - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn infonce_uniform_is_two_log_k() {
        let d = desc(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let m = CorrespondenceSet { pairs: vec![(0, 2), (1, 0), (2, 1)] };
        let l = loss_match_infonce(&d, &d, &m, &MatchLossConfig::default()).unwrap();
        assert!((l.value - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_non_unit_and_empty() {
        let d = desc(&[&[2.0, 0.0]]);
        let m = CorrespondenceSet { pairs: vec![(0, 0)] };
        assert!(matches!(
            loss_match_infonce(&d, &d, &m, &MatchLossConfig::default()),
            Err(Error::NonUnitDescriptor { pixel: 0, .. })
        ));
        let empty = CorrespondenceSet { pairs: vec![] };
        assert!(loss_match_infonce(&d, &d, &empty, &MatchLossConfig::default()).is_err());
    }

    #[test]
    fn sampling_cap_is_strided() {
        let m = CorrespondenceSet { pairs: (0..10).map(|i| (i, i)).collect() };
        assert_eq!(sample_matches(&m, 4), vec![(0, 0), (2, 2), (5, 5), (7, 7)]);
        assert_eq!(sample_matches(&m, 20).len(), 10);
    }

    #[test]
    fn objectives_on_unit_components() {
        let w = StageWeights::default();
        let s1 = stage1_objective(&Stage1Components { pts_loc: 1.0, pts_glb: 1.0, pts_n: 1.0, matching: 1.0 }, &w);
        assert!((s1.unwrap() - 2.175).abs() < 1e-12);
        let s2 = stage2_objective(&Stage2Components { pts_loc: 1.0, pts_glb: 1.0, pts_n: 1.0, normal: 1.0 }, &w);
        assert!((s2.unwrap() - 3.1).abs() < 1e-12);
        let bad = Stage1Components { pts_n: f64::NAN, ..Default::default() };
        assert!(matches!(stage1_objective(&bad, &w), Err(Error::NonFinite(m)) if m.contains("pts_n")));
    }

    #[test]
    fn depth_loss_is_scale_invariant() {
        let gt = [1.0, 2.0, 3.0, 4.0];
        let pred = [1.1, 1.9, 3.3, 4.2];
        let mask = Mask::filled(2, 2, true);
        let a = loss_depth_log_si(&pred, &gt, &mask).unwrap().value;
        let scaled: Vec<f64> = pred.iter().map(|d| d * 7.0).collect();
        let b = loss_depth_log_si(&scaled, &gt, &mask).unwrap().value;
        assert!((a - b).abs() < 1e-12);
        assert_eq!(loss_depth_log_si(&gt, &gt, &mask).unwrap().value, 0.0);
    }
}
