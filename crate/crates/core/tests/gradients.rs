//! Analytic gradients of every loss against central finite differences on
//! random 8×8 two-view inputs.

use pairgeo_core::geometry::{normals_from_pointmap, Frame, Mask, NormalMap, Pointmap, Vec3};
use pairgeo_core::losses::{
    loss_match_infonce, loss_normal_direct, loss_pts_global, loss_pts_local, loss_pts_normal, MatchLossConfig,
    PairNormals, PairPointmaps, PointmapGrads,
};
use pairgeo_core::model::DescriptorMap;
use pairgeo_core::synth::CorrespondenceSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const W: usize = 8;
const H: usize = 8;
const EPS: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Gently curved surface in front of the camera with per-point jitter.
fn surface(rng: &mut ChaCha8Rng, view: u32, invalid: usize) -> Pointmap {
    let mut pts = Vec::with_capacity(W * H);
    for y in 0..H {
        for x in 0..W {
            let (u, v) = (x as f64 - 3.5, y as f64 - 3.5);
            pts.push([
                0.1 * u + rng.random_range(-0.02..0.02),
                0.1 * v + rng.random_range(-0.02..0.02),
                2.0 + 0.02 * u * v + rng.random_range(-0.05..0.05),
            ]);
        }
    }
    let mut bits = vec![true; W * H];
    for _ in 0..invalid {
        bits[rng.random_range(0..W * H)] = false;
    }
    Pointmap::new(W, H, pts, Frame::View(view), Mask::new(W, H, bits).unwrap()).unwrap()
}

struct Pair {
    pred: [Pointmap; 4],
    gt: [Pointmap; 4],
}

impl Pair {
    fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // slots: local0, local1, cross0 (frame 1), cross1 (frame 0)
        let frames = [0, 1, 1, 0];
        let gt = frames.map(|f| surface(&mut rng, f, 6));
        let pred = core::array::from_fn(|k| {
            let mut p = surface(&mut rng, frames[k], 0);
            p.mask = gt[k].mask.clone();
            p
        });
        Pair { pred, gt }
    }

    fn maps(m: &[Pointmap; 4]) -> PairPointmaps<'_> {
        PairPointmaps { local: [&m[0], &m[1]], cross: [&m[2], &m[3]] }
    }
}

fn flatten(g: &PointmapGrads) -> Vec<f64> {
    [&g.local[0], &g.local[1], &g.cross[0], &g.cross[1]].iter().flat_map(|v| v.iter().flatten().copied()).collect()
}

fn check_pointmap_loss(name: &str, pair: &Pair, f: impl Fn(&[Pointmap; 4]) -> (f64, Vec<f64>)) {
    let (_, analytic) = f(&pair.pred);
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut pred = pair.pred.clone();
    for k in 0..4 {
        for i in 0..W * H {
            for c in 0..3 {
                let x0 = pred[k].points[i][c];
                pred[k].points[i][c] = x0 + EPS;
                let up = f(&pred).0;
                pred[k].points[i][c] = x0 - EPS;
                let down = f(&pred).0;
                pred[k].points[i][c] = x0;
                numeric.push((up - down) / (2.0 * EPS));
            }
        }
    }
    let e = rel_err(&analytic, &numeric);
    assert!(e < REL_TOL, "{name}: relative gradient error {e:e}");
}

#[test]
fn local_pointmap_loss_gradient() {
    for seed in 0..3 {
        let pair = Pair::random(seed);
        check_pointmap_loss("local", &pair, |p| {
            let l = loss_pts_local(&Pair::maps(p), &Pair::maps(&pair.gt)).unwrap();
            (l.value, flatten(&l.grad))
        });
    }
}

#[test]
fn global_pointmap_loss_gradient() {
    for seed in 0..3 {
        let pair = Pair::random(seed);
        check_pointmap_loss("global", &pair, |p| {
            let l = loss_pts_global(&Pair::maps(p), &Pair::maps(&pair.gt)).unwrap();
            (l.value, flatten(&l.grad))
        });
    }
}

/// Targets offset from the prediction's derived normals so that no L1
/// component sits near its kink. They are deliberately not renormalized.
fn offset_normals(pred: &Pointmap, gt_mask: &Mask, rng: &mut ChaCha8Rng) -> NormalMap {
    let derived = normals_from_pointmap(&pred.with_mask(gt_mask.clone()).unwrap()).unwrap();
    let normals: Vec<Vec3> = derived
        .normals
        .iter()
        .map(|n| {
            let mut m = [0.0; 3];
            for c in 0..3 {
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                m[c] = n[c] + s * rng.random_range(0.1..0.3);
            }
            m
        })
        .collect();
    NormalMap::new(W, H, normals, pred.frame, gt_mask.clone()).unwrap()
}

fn min_margin(a: &NormalMap, b: &NormalMap) -> f64 {
    a.mask
        .valid_indices()
        .filter(|&i| b.mask.get(i))
        .flat_map(|i| (0..3).map(move |c| (a.normals[i][c] - b.normals[i][c]).abs()))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn pointmap_normal_loss_gradient() {
    let mut checked = 0;
    for seed in 0..20 {
        let pair = Pair::random(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let gtn: [NormalMap; 4] = core::array::from_fn(|k| offset_normals(&pair.pred[k], &pair.gt[k].mask, &mut rng));
        let margin = (0..4)
            .map(|k| {
                let d = normals_from_pointmap(&pair.pred[k].with_mask(pair.gt[k].mask.clone()).unwrap()).unwrap();
                min_margin(&d, &gtn[k])
            })
            .fold(f64::INFINITY, f64::min);
        if margin < 0.05 {
            continue;
        }
        let normals = PairNormals { local: [&gtn[0], &gtn[1]], cross: [&gtn[2], &gtn[3]] };
        check_pointmap_loss("pts normal", &pair, |p| {
            let l = loss_pts_normal(&Pair::maps(p), &normals).unwrap();
            (l.value, flatten(&l.grad))
        });
        checked += 1;
        if checked == 3 {
            break;
        }
    }
    assert_eq!(checked, 3);
}

fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| v / n).collect()
}

/// Projects a gradient taken with respect to unit vectors onto the tangent
/// plane, which is the gradient with respect to the raw pre-normalization
/// vectors evaluated at those unit vectors.
fn tangent(g: &[f64], u: &[f64], dim: usize) -> Vec<f64> {
    g.chunks(dim)
        .zip(u.chunks(dim))
        .flat_map(|(g, u)| {
            let d: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
            g.iter().zip(u).map(move |(a, b)| a - d * b).collect::<Vec<_>>()
        })
        .collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
    (0..n).flat_map(|_| normalize(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())).collect()
}

fn descriptors(raw: &[f64], dim: usize) -> DescriptorMap {
    DescriptorMap::new(W, H, dim, raw.chunks(dim).flat_map(normalize).collect()).unwrap()
}

#[test]
fn infonce_gradient() {
    let dim = 6;
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d1 = unit_rows(&mut rng, W * H, dim);
        let d2 = unit_rows(&mut rng, W * H, dim);
        let mut idx: Vec<u32> = (0..(W * H) as u32).collect();
        let pairs: Vec<(u32, u32)> =
            (0..20).map(|k| (k * 3, idx.swap_remove(rng.random_range(0..idx.len())))).collect();
        let matches = CorrespondenceSet { pairs };
        let cfg = MatchLossConfig { tau: 2.0, ..MatchLossConfig::default() };
        let f = |a: &[f64], b: &[f64]| {
            loss_match_infonce(&descriptors(a, dim), &descriptors(b, dim), &matches, &cfg).unwrap()
        };
        let l = f(&d1, &d2);
        let mut analytic = tangent(&l.grad[0], &d1, dim);
        analytic.extend(tangent(&l.grad[1], &d2, dim));
        let mut numeric = Vec::new();
        let mut raw = [d1.clone(), d2.clone()];
        for v in 0..2 {
            for i in 0..raw[v].len() {
                let x0 = raw[v][i];
                raw[v][i] = x0 + EPS;
                let up = f(&raw[0], &raw[1]).value;
                raw[v][i] = x0 - EPS;
                let down = f(&raw[0], &raw[1]).value;
                raw[v][i] = x0;
                numeric.push((up - down) / (2.0 * EPS));
            }
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < REL_TOL, "infoNCE: relative gradient error {e:e}");
    }
}

#[test]
fn direct_normal_loss_gradient() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: [Vec<f64>; 2] = core::array::from_fn(|_| unit_rows(&mut rng, W * H, 3));
        let mask = |rng: &mut ChaCha8Rng| {
            let mut bits = vec![true; W * H];
            for _ in 0..6 {
                bits[rng.random_range(0..W * H)] = false;
            }
            Mask::new(W, H, bits).unwrap()
        };
        let as_map = |x: &[f64], v: u32, m: &Mask| {
            let n: Vec<Vec3> = x
                .chunks(3)
                .map(|c| {
                    let u = normalize(c);
                    [u[0], u[1], u[2]]
                })
                .collect();
            NormalMap::new(W, H, n, Frame::View(v), m.clone()).unwrap()
        };
        let gt: [NormalMap; 2] = core::array::from_fn(|v| {
            let m = mask(&mut rng);
            let pred = as_map(&raw[v], v as u32, &m);
            let mut r = ChaCha8Rng::seed_from_u64(77 + v as u64);
            let normals = pred
                .normals
                .iter()
                .map(|n| {
                    let m: Vec<f64> = (0..3)
                        .map(|c| n[c] + if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.1..0.3))
                        .collect();
                    let u = normalize(&m);
                    [u[0], u[1], u[2]]
                })
                .collect();
            NormalMap::new(W, H, normals, Frame::View(v as u32), m).unwrap()
        });
        let full = Mask::filled(W, H, true);
        let f = |a: &[f64], b: &[f64]| {
            let (p0, p1) = (as_map(a, 0, &full), as_map(b, 1, &full));
            loss_normal_direct([&p0, &p1], [&gt[0], &gt[1]]).unwrap()
        };
        let l = f(&raw[0], &raw[1]);
        let flat = |g: &Vec<Vec3>| g.iter().flatten().copied().collect::<Vec<_>>();
        let mut analytic = tangent(&flat(&l.grad[0]), &raw[0], 3);
        analytic.extend(tangent(&flat(&l.grad[1]), &raw[1], 3));
        let mut numeric = Vec::new();
        let mut x = raw.clone();
        for v in 0..2 {
            for i in 0..x[v].len() {
                let x0 = x[v][i];
                x[v][i] = x0 + EPS;
                let up = f(&x[0], &x[1]).value;
                x[v][i] = x0 - EPS;
                let down = f(&x[0], &x[1]).value;
                x[v][i] = x0;
                numeric.push((up - down) / (2.0 * EPS));
            }
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < REL_TOL, "normal: relative gradient error {e:e}");
    }
}
