//! Angular normal metrics and depth metrics.

use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, NormalMap};
use crate::linalg::{cross, dot, norm};
use crate::prelude::*;

pub const NORMAL_THRESHOLDS_DEG: [f64; 3] = [11.25, 22.5, 30.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub mean_deg: f64,
    pub median_deg: f64,
    /// Percent of pixels with error below 11.25°, 22.5° and 30°.
    pub delta_11_25: f64,
    pub delta_22_5: f64,
    pub delta_30: f64,
    pub count: usize,
}

/// Per-pixel angle between `pred` and `gt` in degrees over pixels valid in
/// both maps. Evaluated as `atan2(‖a × b‖, ⟨a, b⟩)`, which equals
/// `acos(clamp(⟨a, b⟩, −1, 1))` for unit vectors but stays exact at zero
/// for identical float32-rounded normals.
pub fn normal_angular_errors(pred: &NormalMap, gt: &NormalMap) -> Result<Vec<f64>> {
    if pred.normals.len() != gt.normals.len() {
        return Err(Error::shape("normal maps", (gt.width, gt.height), (pred.width, pred.height)));
    }
    let mask = pred.mask.and(&gt.mask)?;
    let errs: Vec<f64> = mask
        .valid_indices()
        .map(|i| {
            let (a, b) = (pred.normals[i], gt.normals[i]);
            norm(cross(a, b)).atan2(dot(a, b)).to_degrees()
        })
        .collect();
    if errs.is_empty() {
        return Err(Error::EmptyValidSet("normal evaluation"));
    }
    Ok(errs)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl NormalMetrics {
    pub fn from_errors(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::EmptyValidSet("normal evaluation"));
        }
        let n = errors.len() as f64;
        let pct = |t: f64| 100.0 * errors.iter().filter(|e| **e < t).count() as f64 / n;
        Ok(NormalMetrics {
            mean_deg: errors.iter().sum::<f64>() / n,
            median_deg: median(&mut errors.to_vec()),
            delta_11_25: pct(NORMAL_THRESHOLDS_DEG[0]),
            delta_22_5: pct(NORMAL_THRESHOLDS_DEG[1]),
            delta_30: pct(NORMAL_THRESHOLDS_DEG[2]),
            count: errors.len(),
        })
    }
}

pub fn eval_normals(pred: &NormalMap, gt: &NormalMap) -> Result<NormalMetrics> {
    NormalMetrics::from_errors(&normal_angular_errors(pred, gt)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthAlignment {
    None,
    #[default]
    MedianScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rel: f64,
    pub rmse: f64,
    /// Percent of pixels with `max(d̂/d, d/d̂) < 1.25ⁱ`.
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Factor applied to the prediction before scoring.
    pub scale: f64,
    pub count: usize,
}

pub fn eval_depth(pred: &DepthMap, gt: &DepthMap, alignment: DepthAlignment) -> Result<DepthMetrics> {
    if pred.depth.len() != gt.depth.len() {
        return Err(Error::shape("depth maps", (gt.width, gt.height), (pred.width, pred.height)));
    }
    let mask = pred.mask.and(&gt.mask)?;
    let idx: Vec<usize> = mask.valid_indices().collect();
    if idx.is_empty() {
        return Err(Error::EmptyValidSet("depth evaluation"));
    }
    for &i in &idx {
        if !(gt.depth[i] > 0.0) {
            return Err(Error::InvalidConfig(format!("ground-truth depth {} at valid pixel {i}", gt.depth[i])));
        }
        if !pred.depth[i].is_finite() {
            return Err(Error::NonFinite(format!("predicted depth at pixel {i}")));
        }
    }
    let scale = match alignment {
        DepthAlignment::None => 1.0,
        DepthAlignment::MedianScale => {
            let mut ratios: Vec<f64> =
                idx.iter().filter(|&&i| pred.depth[i] > 0.0).map(|&i| gt.depth[i] / pred.depth[i]).collect();
            if ratios.is_empty() {
                return Err(Error::Degenerate("no positive predicted depth for median alignment"));
            }
            median(&mut ratios)
        }
    };
    let n = idx.len() as f64;
    let (mut rel, mut sq) = (0.0, 0.0);
    let mut within = [0usize; 3];
    for &i in &idx {
        let (d, e) = (gt.depth[i], pred.depth[i] * scale);
        rel += (e - d).abs() / d;
        sq += (e - d) * (e - d);
        let ratio = if e > 0.0 { (e / d).max(d / e) } else { f64::INFINITY };
        let mut t = 1.0;
        for w in within.iter_mut() {
            t *= 1.25;
            if ratio < t {
                *w += 1;
            }
        }
    }
    Ok(DepthMetrics {
        rel: rel / n,
        rmse: (sq / n).sqrt(),
        delta1: 100.0 * within[0] as f64 / n,
        delta2: 100.0 * within[1] as f64 / n,
        delta3: 100.0 * within[2] as f64 / n,
        scale,
        count: idx.len(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub normals: Option<NormalMetrics>,
    pub depth: Option<DepthMetrics>,
    pub depth_alignment: DepthAlignment,
    pub match_recall: Option<f64>,
    pub match_radius_px: Option<f64>,
    /// `(threshold in degrees, AUC)` pairs.
    pub pose_auc: Vec<(f64, f64)>,
    pub samples: usize,
}

/// Pools normal errors over all pixels of all samples and averages the
/// per-sample depth metrics.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    normal_errors: Vec<f64>,
    depth: Vec<DepthMetrics>,
    recall: Vec<f64>,
    pose_errors: Vec<f64>,
    samples: usize,
}

impl MetricAccumulator {
    pub fn add_normals(&mut self, pred: &NormalMap, gt: &NormalMap) -> Result<()> {
        self.normal_errors.extend(normal_angular_errors(pred, gt)?);
        Ok(())
    }

    pub fn add_depth(&mut self, m: DepthMetrics) {
        self.depth.push(m);
    }

    pub fn add_recall(&mut self, r: f64) {
        self.recall.push(r);
    }

    pub fn add_pose_error(&mut self, e: f64) {
        self.pose_errors.push(e);
    }

    pub fn finish_sample(&mut self) {
        self.samples += 1;
    }

    /// Appends everything gathered by `other`.
    pub fn merge(&mut self, other: MetricAccumulator) {
        self.normal_errors.extend(other.normal_errors);
        self.depth.extend(other.depth);
        self.recall.extend(other.recall);
        self.pose_errors.extend(other.pose_errors);
        self.samples += other.samples;
    }

    pub fn report(&self, alignment: DepthAlignment, radius_px: f64, auc_thresholds: &[f64]) -> Result<MetricReport> {
        let normals =
            if self.normal_errors.is_empty() { None } else { Some(NormalMetrics::from_errors(&self.normal_errors)?) };
        let depth = if self.depth.is_empty() {
            None
        } else {
            let n = self.depth.len() as f64;
            let avg = |f: fn(&DepthMetrics) -> f64| self.depth.iter().map(f).sum::<f64>() / n;
            Some(DepthMetrics {
                rel: avg(|m| m.rel),
                rmse: avg(|m| m.rmse),
                delta1: avg(|m| m.delta1),
                delta2: avg(|m| m.delta2),
                delta3: avg(|m| m.delta3),
                scale: avg(|m| m.scale),
                count: self.depth.iter().map(|m| m.count).sum(),
            })
        };
        let match_recall =
            (!self.recall.is_empty()).then(|| self.recall.iter().sum::<f64>() / self.recall.len() as f64);
        let pose_auc = if self.pose_errors.is_empty() {
            Vec::new()
        } else {
            let auc = crate::matching::pose_auc(&self.pose_errors, auc_thresholds)?;
            auc_thresholds.iter().copied().zip(auc).collect()
        };
        Ok(MetricReport {
            normals,
            depth,
            depth_alignment: alignment,
            match_recall,
            match_radius_px: match_recall.map(|_| radius_px),
            pose_auc,
            samples: self.samples,
        })
    }
}

impl MetricReport {
    /// Fixed-width text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28}{:>12}", "metric", "value");
        let _ = writeln!(s, "{:<28}{:>12}", "samples", self.samples);
        if let Some(n) = &self.normals {
            for (name, v) in [
                ("normal mean (deg)", n.mean_deg),
                ("normal median (deg)", n.median_deg),
                ("normal <11.25 (%)", n.delta_11_25),
                ("normal <22.5 (%)", n.delta_22_5),
                ("normal <30 (%)", n.delta_30),
            ] {
                let _ = writeln!(s, "{name:<28}{v:>12.4}");
            }
        }
        if let Some(d) = &self.depth {
            let tag = match self.depth_alignment {
                DepthAlignment::None => "none",
                DepthAlignment::MedianScale => "median-scale",
            };
            let _ = writeln!(s, "{:<28}{:>12}", "depth alignment", tag);
            for (name, v) in [
                ("depth REL", d.rel),
                ("depth RMSE", d.rmse),
                ("depth d1 (%)", d.delta1),
                ("depth d2 (%)", d.delta2),
                ("depth d3 (%)", d.delta3),
            ] {
                let _ = writeln!(s, "{name:<28}{v:>12.4}");
            }
        }
        if let (Some(r), Some(px)) = (self.match_recall, self.match_radius_px) {
            let _ = writeln!(s, "{:<28}{:>12.4}", format!("match recall@{px}px"), r);
        }
        for (t, a) in &self.pose_auc {
            let _ = writeln!(s, "{:<28}{:>12.4}", format!("pose AUC@{t}deg"), a);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, Mask};

    fn normals(v: Vec<[f64; 3]>) -> NormalMap {
        let n = v.len();
        NormalMap::new(n, 1, v, Frame::View(0), Mask::filled(n, 1, true)).unwrap()
    }

    fn depth(v: Vec<f64>) -> DepthMap {
        let n = v.len();
        DepthMap::new(n, 1, v, Mask::filled(n, 1, true)).unwrap()
    }

    #[test]
    fn identical_normals() {
        let n = normals(vec![[0.0, 0.0, -1.0], [0.6, 0.0, -0.8]]);
        let m = eval_normals(&n, &n).unwrap();
        assert_eq!((m.mean_deg, m.median_deg, m.delta_11_25, m.delta_30), (0.0, 0.0, 100.0, 100.0));
    }

    #[test]
    fn rotated_normals() {
        let t = 10f64.to_radians();
        let gt = normals(vec![[0.0, 0.0, -1.0]; 4]);
        let pred = normals(vec![[t.sin(), 0.0, -t.cos()]; 4]);
        let m = eval_normals(&pred, &gt).unwrap();
        assert!((m.mean_deg - 10.0).abs() < 1e-9 && (m.median_deg - 10.0).abs() < 1e-9);
        assert_eq!(m.delta_11_25, 100.0);
    }

    #[test]
    fn depth_scaled() {
        let gt = depth(vec![1.0, 2.0, 4.0]);
        let pred = depth(vec![1.3, 2.6, 5.2]);
        let raw = eval_depth(&pred, &gt, DepthAlignment::None).unwrap();
        assert_eq!((raw.delta1, raw.delta2), (0.0, 100.0));
        let aligned = eval_depth(&pred, &gt, DepthAlignment::MedianScale).unwrap();
        assert!(aligned.rel < 1e-12);
        assert_eq!(aligned.delta1, 100.0);
        assert!(eval_depth(&pred, &depth(vec![1.0, 0.0, 1.0]), DepthAlignment::None).is_err());
    }

    #[test]
    fn table_lists_every_metric() {
        let mut acc = MetricAccumulator::default();
        let n = normals(vec![[0.0, 0.0, -1.0]]);
        acc.add_normals(&n, &n).unwrap();
        acc.finish_sample();
        let t = acc.report(DepthAlignment::MedianScale, 2.0, &[5.0]).unwrap().to_table();
        assert!(t.contains("normal median (deg)"));
    }
}
