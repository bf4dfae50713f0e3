//! Mutual nearest-neighbour decoding of dense descriptors, match recall,
//! relative pose from matched pointmaps and pose AUC.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose_procrustes, Mask, Pointmap, RigidPose, Vec3};
use crate::linalg::{matmul_a_bt, norm, sub};
use crate::model::DescriptorMap;
use crate::prelude::*;
use crate::sim3::{direction_angle_deg, rotation_angle_deg, SimilarityTransform};
use crate::synth::CorrespondenceSet;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub matches: CorrespondenceSet,
    /// Descriptor dot product of each match.
    pub scores: Vec<f64>,
}

/// `exp(tau · ⟨d1_i, d2_j⟩)`; pass a negative `tau` for the negated convention.
pub fn similarity(desc1: &DescriptorMap, desc2: &DescriptorMap, i: usize, j: usize, tau: f64) -> f64 {
    let dot: f64 = desc1.get(i).iter().zip(desc2.get(j)).map(|(a, b)| a * b).sum();
    (tau * dot).exp()
}

const QUERY_BLOCK: usize = 256;

/// Pixel `i` of view 1 and `j` of view 2 match when each is the other's
/// best-scoring valid pixel. Ties go to the lowest pixel index.
pub fn reciprocal_nn_match(
    desc1: &DescriptorMap,
    desc2: &DescriptorMap,
    mask1: &Mask,
    mask2: &Mask,
) -> Result<MatchResult> {
    if desc1.dim != desc2.dim {
        return Err(Error::shape("descriptor dim", desc1.dim, desc2.dim));
    }
    if mask1.bits().len() != desc1.width * desc1.height || mask2.bits().len() != desc2.width * desc2.height {
        return Err(Error::shape("descriptor masks", (desc1.width, desc1.height), (mask1.width(), mask1.height())));
    }
    let dim = desc1.dim;
    let idx1: Vec<usize> = mask1.valid_indices().collect();
    let idx2: Vec<usize> = mask2.valid_indices().collect();
    if idx1.is_empty() || idx2.is_empty() {
        return Ok(MatchResult::default());
    }
    let gather =
        |d: &DescriptorMap, idx: &[usize]| -> Vec<f64> { idx.iter().flat_map(|&i| d.get(i).iter().copied()).collect() };
    let b = gather(desc2, &idx2);
    let n2 = idx2.len();
    let mut best_of_1 = vec![(f64::NEG_INFINITY, 0usize); idx1.len()];
    let mut best_of_2 = vec![(f64::NEG_INFINITY, 0usize); n2];
    let mut block = Vec::new();
    for start in (0..idx1.len()).step_by(QUERY_BLOCK) {
        let end = (start + QUERY_BLOCK).min(idx1.len());
        let a = gather(desc1, &idx1[start..end]);
        block.clear();
        block.resize((end - start) * n2, 0.0);
        matmul_a_bt(&a, &b, &mut block, end - start, dim, n2, false);
        for (r, row) in block.chunks_exact(n2).enumerate() {
            let q = start + r;
            for (c, &s) in row.iter().enumerate() {
                if s > best_of_1[q].0 {
                    best_of_1[q] = (s, c);
                }
                if s > best_of_2[c].0 {
                    best_of_2[c] = (s, q);
                }
            }
        }
    }
    let mut out = MatchResult::default();
    for (q, &(s, c)) in best_of_1.iter().enumerate() {
        if best_of_2[c].1 == q {
            out.matches.pairs.push((idx1[q] as u32, idx2[c] as u32));
            out.scores.push(s);
        }
    }
    Ok(out)
}

/// Fraction of ground-truth matches `(i, j)` whose predicted partner of `i`
/// lies within `radius_px` (inclusive) of `j` in view 2, which is
/// `width2` pixels wide.
pub fn match_recall_at_px(
    pred: &CorrespondenceSet,
    gt: &CorrespondenceSet,
    width2: usize,
    radius_px: f64,
) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::EmptyValidSet("ground-truth matches"));
    }
    let mut partner = alloc::collections::BTreeMap::new();
    for &(i, j) in &pred.pairs {
        partner.entry(i).or_insert(j);
    }
    let xy = |p: u32| ((p as usize % width2) as f64, (p as usize / width2) as f64);
    let hits = gt
        .pairs
        .iter()
        .filter(|(i, j)| {
            partner.get(i).is_some_and(|jp| {
                let (a, b) = (xy(*jp), xy(*j));
                ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= radius_px
            })
        })
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation_deg: f64,
}

impl PoseError {
    pub fn max(&self) -> f64 {
        self.rotation_deg.max(self.translation_deg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEstimate {
    /// Maps view-1 local points into view 2's frame.
    pub transform: SimilarityTransform,
    pub rms: f64,
    pub inliers: usize,
}

impl PoseEstimate {
    /// Errors against the ground-truth view-1-to-view-2 transform.
    pub fn errors(&self, gt: &RigidPose) -> PoseError {
        PoseError {
            rotation_deg: rotation_angle_deg(&self.transform.rotation, &gt.rotation),
            translation_deg: direction_angle_deg(&self.transform.translation, &gt.translation),
        }
    }
}

fn matched_points(pm1: &Pointmap, pm2: &Pointmap, matches: &CorrespondenceSet) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut src = Vec::with_capacity(matches.len());
    let mut dst = Vec::with_capacity(matches.len());
    for &(i, j) in &matches.pairs {
        let (i, j) = (i as usize, j as usize);
        if i < pm1.points.len() && j < pm2.points.len() && pm1.mask.get(i) && pm2.mask.get(j) {
            src.push(pm1.points[i]);
            dst.push(pm2.points[j]);
        }
    }
    (src, dst)
}

/// Similarity transform taking matched view-1 points onto view-2 points.
pub fn pose_from_matches(
    pm1_local: &Pointmap,
    pm2_local: &Pointmap,
    matches: &CorrespondenceSet,
) -> Result<PoseEstimate> {
    let (src, dst) = matched_points(pm1_local, pm2_local, matches);
    let (transform, rms) = relative_pose_procrustes(&src, &dst, true)?;
    Ok(PoseEstimate { transform, rms, inliers: src.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier distance in view-2 units.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { iterations: 1000, inlier_threshold: 0.05, seed: 0 }
    }
}

/// Three-point RANSAC around [`pose_from_matches`], refitted on the best
/// inlier set.
pub fn pose_from_matches_ransac(
    pm1_local: &Pointmap,
    pm2_local: &Pointmap,
    matches: &CorrespondenceSet,
    cfg: &RansacConfig,
) -> Result<PoseEstimate> {
    let (src, dst) = matched_points(pm1_local, pm2_local, matches);
    if src.len() < 3 {
        return Err(Error::InsufficientMatches { needed: 3, got: src.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..cfg.iterations {
        let a = rng.random_range(0..src.len());
        let b = rng.random_range(0..src.len());
        let c = rng.random_range(0..src.len());
        if a == b || b == c || a == c {
            continue;
        }
        let Ok((t, _)) = relative_pose_procrustes(&[src[a], src[b], src[c]], &[dst[a], dst[b], dst[c]], true) else {
            continue;
        };
        let inliers: Vec<usize> =
            (0..src.len()).filter(|&k| norm(sub(t.apply(src[k]), dst[k])) < cfg.inlier_threshold).collect();
        if inliers.len() > best.len() {
            best = inliers;
        }
    }
    if best.len() < 3 {
        return Err(Error::InsufficientMatches { needed: 3, got: best.len() });
    }
    let s: Vec<Vec3> = best.iter().map(|&k| src[k]).collect();
    let d: Vec<Vec3> = best.iter().map(|&k| dst[k]).collect();
    let (transform, rms) = relative_pose_procrustes(&s, &d, true)?;
    Ok(PoseEstimate { transform, rms, inliers: best.len() })
}

/// Area under the recall-versus-error curve up to each threshold,
/// normalized to [0, 1]: `mean(max(0, 1 − e / θ))`.
pub fn pose_auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::EmptyValidSet("pose errors"));
    }
    if let Some(e) = errors.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::InvalidConfig(format!("pose errors must be non-negative, got {e}")));
    }
    thresholds
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return Err(Error::InvalidConfig(format!("AUC threshold must be positive, got {t}")));
            }
            Ok(errors.iter().map(|e| (1.0 - e / t).max(0.0)).sum::<f64>() / errors.len() as f64)
        })
        .collect()
}

/// Rotation by `deg` degrees about `axis` as a rigid pose.
pub fn rotation_about(axis: Vector3<f64>, deg: f64) -> RigidPose {
    let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), deg.to_radians());
    RigidPose { rotation: *r.matrix(), translation: Vector3::zeros() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(n: usize, order: &[usize]) -> DescriptorMap {
        let mut data = vec![0.0; n * n];
        for (p, &k) in order.iter().enumerate() {
            data[p * n + k] = 1.0;
        }
        DescriptorMap::new(n, 1, n, data).unwrap()
    }

    #[test]
    fn similarity_values() {
        let d = one_hot(2, &[0, 1]);
        assert!((similarity(&d, &d, 0, 0, 1.0) - core::f64::consts::E).abs() < 1e-12);
        assert_eq!(similarity(&d, &d, 0, 1, 1.0), 1.0);
    }

    #[test]
    fn identity_and_permutation_recovered() {
        let d1 = one_hot(5, &[0, 1, 2, 3, 4]);
        let m = Mask::filled(5, 1, true);
        let r = reciprocal_nn_match(&d1, &d1, &m, &m).unwrap();
        assert_eq!(r.matches.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        let perm = [3, 0, 4, 1, 2];
        let d2 = one_hot(5, &perm);
        let r = reciprocal_nn_match(&d1, &d2, &m, &m).unwrap();
        for (i, j) in r.matches.pairs {
            assert_eq!(perm[j as usize], i as usize);
        }
    }

    #[test]
    fn identical_descriptors_leave_one_pair() {
        let d = DescriptorMap::new(4, 1, 2, [1.0, 0.0].repeat(4)).unwrap();
        let m = Mask::filled(4, 1, true);
        let r = reciprocal_nn_match(&d, &d, &m, &m).unwrap();
        assert_eq!(r.matches.pairs, vec![(0, 0)]);
    }

    #[test]
    fn recall_radius() {
        let gt = CorrespondenceSet { pairs: vec![(0, 10), (1, 20)] };
        let shifted = CorrespondenceSet { pairs: vec![(0, 11), (1, 21)] };
        assert_eq!(match_recall_at_px(&gt, &gt, 8, 0.0).unwrap(), 1.0);
        assert_eq!(match_recall_at_px(&shifted, &gt, 8, 2.0).unwrap(), 1.0);
        assert_eq!(match_recall_at_px(&shifted, &gt, 8, 0.5).unwrap(), 0.0);
        assert_eq!(match_recall_at_px(&CorrespondenceSet::default(), &gt, 8, 2.0).unwrap(), 0.0);
        assert!(match_recall_at_px(&gt, &CorrespondenceSet::default(), 8, 2.0).is_err());
    }

    #[test]
    fn auc_closed_forms() {
        assert_eq!(pose_auc(&[0.0, 0.0], &[5.0, 10.0]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(pose_auc(&[30.0], &[5.0, 10.0, 20.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(pose_auc(&[5.0], &[10.0]).unwrap(), vec![0.5]);
        assert!(pose_auc(&[], &[10.0]).is_err());
    }
}
