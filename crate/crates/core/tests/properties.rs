//! Geometric and architectural invariants.

use nalgebra::Vector3;
use pairgeo_core::geometry::{normals_from_pointmap, Frame, Mask, Pointmap, Vec3};
use pairgeo_core::losses::{loss_pts_global, loss_pts_local, loss_pts_normal, PairNormals, PairPointmaps};
use pairgeo_core::model::{forward_pair, init_params, ModelConfig, Network};
use pairgeo_core::rope::{apply_axial_rope_2d, interpolated_positions, RopeConfig};
use pairgeo_core::synth::{generate_sample, Image, SampleConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    (d / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Pinhole pointmap of a sphere of radius `r` at depth `cz` on the axis.
fn sphere_pointmap(w: usize, h: usize, f: f64, cz: f64, r: f64) -> Pointmap {
    let mut pts = vec![[0.0; 3]; w * h];
    let mut bits = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let d = [(u as f64 - w as f64 / 2.0) / f, (v as f64 - h as f64 / 2.0) / f, 1.0];
            // |t d − c|² = r², c = (0, 0, cz)
            let a = d[0] * d[0] + d[1] * d[1] + 1.0;
            let b = -2.0 * cz;
            let c = cz * cz - r * r;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                continue;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            pts[v * w + u] = [t * d[0], t * d[1], t * d[2]];
            bits[v * w + u] = true;
        }
    }
    Pointmap::new(w, h, pts, Frame::View(0), Mask::new(w, h, bits).unwrap()).unwrap()
}

#[test]
fn sphere_normals_match_analytic_normals() {
    let (w, h, cz, r) = (96, 96, 3.0, 1.0);
    let pm = sphere_pointmap(w, h, 80.0, cz, r);
    let n = normals_from_pointmap(&pm).unwrap();
    let mut errs = Vec::new();
    for idx in pm.mask.valid_indices() {
        let (u, v) = (idx % w, idx / w);
        // exclude a 2-pixel silhouette band
        let interior = (-2i64..=2).all(|dv| {
            (-2i64..=2).all(|du| {
                let (x, y) = (u as i64 + du, v as i64 + dv);
                x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && pm.mask.get(y as usize * w + x as usize)
            })
        });
        if !interior || !n.mask.get(idx) {
            continue;
        }
        let p = pm.points[idx];
        let analytic = [p[0] / r, p[1] / r, (p[2] - cz) / r];
        errs.push(angle_deg(n.normals[idx], analytic));
    }
    assert!(errs.len() > 1000);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(mean < 2.0, "mean sphere normal error {mean}°");
}

#[test]
fn tilted_plane_normals_are_exact() {
    let (w, h) = (12, 10);
    let normal = Vector3::new(0.3, -0.2, -1.0).normalize();
    let d0 = 2.5;
    let mut pts = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let ray = Vector3::new((u as f64 - 6.0) / 10.0, (v as f64 - 5.0) / 10.0, 1.0);
            // plane n·x = −d0 (facing the camera)
            let t = -d0 / normal.dot(&ray);
            pts.push([ray.x * t, ray.y * t, ray.z * t]);
        }
    }
    let pm = Pointmap::new(w, h, pts, Frame::View(0), Mask::filled(w, h, true)).unwrap();
    let n = normals_from_pointmap(&pm).unwrap();
    for idx in 0..w * h {
        for c in 0..3 {
            assert!((n.normals[idx][c] - normal[c]).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pointmap_losses_are_scale_invariant(seed in 0u64..40, which in 0usize..3) {
        let s = [0.1, 1.0, 10.0][which];
        let sample = generate_sample(seed, &SampleConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt_cross = [sample.cross_pointmap(0).unwrap(), sample.cross_pointmap(1).unwrap()];
        let gt_local = [sample.views[0].pointmap.clone(), sample.views[1].pointmap.clone()];
        let noisy = |pm: &Pointmap, rng: &mut ChaCha8Rng| {
            let mut p = pm.clone();
            for q in &mut p.points {
                for c in q.iter_mut() {
                    *c += rng.random_range(-0.05..0.05);
                }
            }
            p
        };
        let pred_local = [noisy(&gt_local[0], &mut rng), noisy(&gt_local[1], &mut rng)];
        let pred_cross = [noisy(&gt_cross[0], &mut rng), noisy(&gt_cross[1], &mut rng)];
        let scaled_local = [pred_local[0].scaled(s), pred_local[1].scaled(s)];
        let scaled_cross = [pred_cross[0].scaled(s), pred_cross[1].scaled(s)];
        let gt = PairPointmaps { local: [&gt_local[0], &gt_local[1]], cross: [&gt_cross[0], &gt_cross[1]] };
        let a = PairPointmaps { local: [&pred_local[0], &pred_local[1]], cross: [&pred_cross[0], &pred_cross[1]] };
        let b = PairPointmaps { local: [&scaled_local[0], &scaled_local[1]], cross: [&scaled_cross[0], &scaled_cross[1]] };
        let gtn_cross = [sample.cross_normals(0).unwrap(), sample.cross_normals(1).unwrap()];
        let gtn = PairNormals {
            local: [&sample.views[0].normals, &sample.views[1].normals],
            cross: [&gtn_cross[0], &gtn_cross[1]],
        };
        let l = [
            (loss_pts_local(&a, &gt).unwrap().value, loss_pts_local(&b, &gt).unwrap().value),
            (loss_pts_global(&a, &gt).unwrap().value, loss_pts_global(&b, &gt).unwrap().value),
            (loss_pts_normal(&a, &gtn).unwrap().value, loss_pts_normal(&b, &gtn).unwrap().value),
        ];
        for (x, y) in l {
            prop_assert!((x - y).abs() <= 1e-6, "{} vs {}", x, y);
        }
    }

    #[test]
    fn rope_scores_depend_only_on_offset(
        seed in 0u64..1000,
        a in (0usize..6, 0usize..6),
        b in (0usize..6, 0usize..6),
        shift in (0usize..3, 0usize..3),
    ) {
        let grid = (9, 9);
        let cfg = RopeConfig::new(8, grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let score = |pa: (usize, usize), pb: (usize, usize)| {
            let mut t = vec![0.0; 81 * 8];
            let (ia, ib) = (pa.0 * 9 + pa.1, pb.0 * 9 + pb.1);
            let rq = {
                t[ia * 8..ia * 8 + 8].copy_from_slice(&q);
                apply_axial_rope_2d(&t, 8, grid, &cfg).unwrap()[ia * 8..ia * 8 + 8].to_vec()
            };
            t.iter_mut().for_each(|x| *x = 0.0);
            t[ib * 8..ib * 8 + 8].copy_from_slice(&k);
            let rk = apply_axial_rope_2d(&t, 8, grid, &cfg).unwrap()[ib * 8..ib * 8 + 8].to_vec();
            rq.iter().zip(&rk).map(|(x, y)| x * y).sum::<f64>()
        };
        let s0 = score(a, b);
        let s1 = score((a.0 + shift.0, a.1 + shift.1), (b.0 + shift.0, b.1 + shift.1));
        prop_assert!((s0 - s1).abs() <= 1e-5);
    }
}

#[test]
fn rope_at_training_length_is_bitwise_base() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens: Vec<f64> = (0..16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    // same 4×4 grid, once through the interpolation path (grid == train grid)
    // and once below the trained extent, where positions are raw indices
    let at = apply_axial_rope_2d(&tokens, 16, (4, 4), &RopeConfig::new(16, (4, 4))).unwrap();
    let base = apply_axial_rope_2d(&tokens, 16, (4, 4), &RopeConfig::new(16, (8, 8))).unwrap();
    assert!(at.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
    let idx: Vec<usize> = (0..7).collect();
    let p = interpolated_positions(&idx, 7, 7);
    assert!(p.iter().zip(&idx).all(|(a, b)| a.to_bits() == (*b as f64).to_bits()));
}

#[test]
fn rope_positions_stay_in_trained_range() {
    for l in [4usize, 5, 8] {
        let idx: Vec<usize> = (0..2 * l).collect();
        let p = interpolated_positions(&idx, l, 2 * l);
        assert!(p.iter().all(|x| *x >= 0.0 && *x < l as f64));
        assert_eq!(p[2], 1.0);
        assert_eq!(p[2 * l - 1], l as f64 - 0.5);
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn swapping_inputs_swaps_outputs() {
    let cfg = ModelConfig::tiny();
    let mut ck = init_params(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in ck.params.tensors_mut() {
        for x in &mut t.data {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    let net = Network::new(&cfg).unwrap();
    let (a, b) = (random_image(&mut rng, 64, 64), random_image(&mut rng, 64, 64));
    let ab = forward_pair(&net, &ck.params, [&a, &b]).unwrap();
    let ba = forward_pair(&net, &ck.params, [&b, &a]).unwrap();
    let max_diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let flat = |p: &[Vec3]| p.iter().flatten().copied().collect::<Vec<_>>();
    for v in 0..2 {
        let (x, y) = (&ab[v], &ba[1 - v]);
        let d = [
            max_diff(&flat(&x.pointmap_local.points), &flat(&y.pointmap_local.points)),
            max_diff(&flat(&x.pointmap_cross.points), &flat(&y.pointmap_cross.points)),
            max_diff(&flat(&x.normals.normals), &flat(&y.normals.normals)),
            max_diff(&x.depth.depth, &y.depth.depth),
            max_diff(&x.descriptors.data, &y.descriptors.data),
        ];
        assert!(d.iter().all(|e| *e <= 1e-5), "{d:?}");
    }
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [
        ModelConfig::tiny(),
        ModelConfig {
            n_dec_blocks: 3,
            patch_size: 8,
            rope: RopeConfig::new(32, (8, 8)),
            mlp_ratio: 2,
            descriptor_dim: 8,
            ..ModelConfig::tiny()
        },
    ] {
        let net = Network::new(&cfg).unwrap();
        let params = net.empty_params();
        let (e, d, m, p) = (cfg.embed_dim, cfg.decoder_dim, cfg.mlp_ratio, cfg.patch_size);
        let decoder: usize = params.iter().filter(|(n, _)| n.starts_with("dec")).map(|(_, t)| t.data.len()).sum();
        // per block: self-attn 4D²+4D, cross-attn 4D²+4D, MLP 2mD²+(m+1)D,
        // four LayerNorms 8D; plus the embedding and final norm
        let block = 8 * d * d + 8 * d + 2 * m * d * d + (m + 1) * d + 8 * d;
        assert_eq!(decoder, cfg.n_dec_blocks * block + e * d + d + 2 * d);
        let c = 3 + 3 + 3 + 1 + cfg.descriptor_dim;
        let encoder = cfg.n_enc_blocks * (4 * e * e + 4 * e + 2 * m * e * e + (m + 1) * e + 4 * e) + 2 * e;
        let total = 3 * p * p * e + e + encoder + decoder + p * p * c * (d + 1);
        assert_eq!(params.total_len(), total);
        assert_eq!(cfg.parameter_count(), total);
    }
}

#[test]
fn zero_cross_attention_decouples_views() {
    let cfg = ModelConfig::tiny();
    let mut ck = init_params(&cfg, 2).unwrap();
    let names: Vec<String> = ck.params.names().to_vec();
    for (name, t) in names.iter().zip(ck.params.tensors_mut()) {
        if name.contains("cross_attn.proj") {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let net = Network::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_image(&mut rng, 64, 64);
    let (b, c) = (random_image(&mut rng, 64, 64), random_image(&mut rng, 64, 64));
    let x = forward_pair(&net, &ck.params, [&a, &b]).unwrap();
    let y = forward_pair(&net, &ck.params, [&a, &c]).unwrap();
    assert_eq!(x[0].pointmap_local, y[0].pointmap_local);
    assert_eq!(x[0].descriptors, y[0].descriptors);
    assert_ne!(x[1].pointmap_local, y[1].pointmap_local);
}

#[test]
fn double_resolution_forward_is_finite_and_normalized() {
    let cfg = ModelConfig::tiny();
    let ck = init_params(&cfg, 6).unwrap();
    let net = Network::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (random_image(&mut rng, 128, 128), random_image(&mut rng, 128, 128));
    let out = forward_pair(&net, &ck.params, [&a, &b]).unwrap();
    for o in &out {
        assert_eq!((o.width(), o.height()), (128, 128));
        assert!(o.pointmap_local.points.iter().flatten().all(|x| x.is_finite()));
        assert!(o.depth.depth.iter().all(|x| x.is_finite() && *x > 0.0));
        o.descriptors.check_unit(1e-4).unwrap();
        for n in &o.normals.normals {
            assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn zeroed_pointmap_head_gives_zero_points() {
    let cfg = ModelConfig::tiny();
    let mut ck = init_params(&cfg, 1).unwrap();
    let names: Vec<String> = ck.params.names().to_vec();
    for (name, t) in names.iter().zip(ck.params.tensors_mut()) {
        if name.starts_with("head.pointmap") {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let net = Network::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = (random_image(&mut rng, 64, 64), random_image(&mut rng, 64, 64));
    let out = forward_pair(&net, &ck.params, [&a, &b]).unwrap();
    assert!(out.iter().all(|o| o.pointmap_local.points.iter().chain(&o.pointmap_cross.points).all(|p| *p == [0.0; 3])));
}
