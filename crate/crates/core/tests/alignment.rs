//! Multi-view alignment round trips on exact synthetic correspondences.

use nalgebra::Vector3;
use pairgeo_core::align::{
    fuse_pointcloud, global_alignment, graph_pairs, AlignOptions, GraphStrategy, ViewGraph, ViewNode,
};
use pairgeo_core::geometry::{relative_pose_procrustes, Frame, Mask, Pointmap, Vec3};
use pairgeo_core::sim3::{rotation_angle_deg, SimilarityTransform};
use pairgeo_core::synth::CorrespondenceSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 12;

/// A bumpy surface patch in the reference frame.
fn world_points() -> Vec<Vec3> {
    let mut pts = Vec::new();
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (u, v) = (x as f64 / SIDE as f64 - 0.5, y as f64 / SIDE as f64 - 0.5);
            pts.push([u, v, 2.0 + 0.3 * (3.0 * u).sin() * (2.0 * v).cos()]);
        }
    }
    pts
}

fn random_sim3(rng: &mut ChaCha8Rng) -> SimilarityTransform {
    let axis =
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
    SimilarityTransform::from_log(
        rng.random_range(-0.5..0.5),
        axis * rng.random_range(0.1..0.6),
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
    )
}

/// Views whose pointmaps are `to_ref[v]⁻¹` applied to the shared surface,
/// stored in a per-view pixel order. Matches link pixels of the same point.
fn scene(to_ref: &[SimilarityTransform], seed: u64, strategy: GraphStrategy) -> ViewGraph {
    let world = world_points();
    let n = world.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders = Vec::new();
    let mut nodes = Vec::new();
    for (v, t) in to_ref.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let inv = t.inverse();
        let pts = order.iter().map(|&k| inv.apply(world[k])).collect();
        let pm = Pointmap::new(SIDE, SIDE, pts, Frame::View(v as u32), Mask::filled(SIDE, SIDE, true)).unwrap();
        nodes.push(ViewNode { id: v as u32, pointmap: pm, colors: vec![[v as u8 * 40, 0, 0]; n] });
        orders.push(order);
    }
    let pos = |v: usize, k: usize| orders[v].iter().position(|&x| x == k).unwrap() as u32;
    let edges = graph_pairs(to_ref.len(), strategy)
        .unwrap()
        .into_iter()
        .map(|(a, b)| {
            let pairs = (0..n).step_by(2).map(|k| (pos(a as usize, k), pos(b as usize, k))).collect();
            (a, b, CorrespondenceSet { pairs })
        })
        .collect();
    ViewGraph::from_parts(nodes, edges).unwrap()
}

fn assert_close(got: &SimilarityTransform, want: &SimilarityTransform) {
    assert!(rotation_angle_deg(&got.rotation, &want.rotation) < 0.1);
    assert!((got.scale - want.scale).abs() < 1e-3, "{} vs {}", got.scale, want.scale);
    assert!((got.translation - want.translation).norm() < 1e-3);
}

#[test]
fn four_perturbed_views_are_recovered() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth = vec![SimilarityTransform::identity()];
        truth.extend((0..3).map(|_| random_sim3(&mut rng)));
        let g = scene(&truth, seed, GraphStrategy::Exhaustive);
        let r = global_alignment(&g, &AlignOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.residual < 1e-6, "residual {}", r.residual);
        assert_eq!(r.transforms[&0], SimilarityTransform::identity());
        for (v, t) in truth.iter().enumerate() {
            assert_close(&r.transforms[&(v as u32)], t);
        }
    }
}

#[test]
fn star_graph_recovers_the_same_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut truth = vec![SimilarityTransform::identity()];
    truth.extend((0..3).map(|_| random_sim3(&mut rng)));
    let g = scene(&truth, 4, GraphStrategy::Star(2));
    assert_eq!(g.edges.len(), 3);
    let r = global_alignment(&g, &AlignOptions::default()).unwrap();
    for (v, t) in truth.iter().enumerate() {
        assert_close(&r.transforms[&(v as u32)], t);
    }
}

#[test]
fn two_views_agree_with_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = [SimilarityTransform::identity(), random_sim3(&mut rng)];
    let g = scene(&truth, 9, GraphStrategy::Exhaustive);
    let r = global_alignment(&g, &AlignOptions::default()).unwrap();
    let e = &g.edges[0];
    let src: Vec<Vec3> = e.matches.matches.pairs.iter().map(|(_, j)| g.nodes[1].pointmap.points[*j as usize]).collect();
    let dst: Vec<Vec3> = e.matches.matches.pairs.iter().map(|(i, _)| g.nodes[0].pointmap.points[*i as usize]).collect();
    let (closed, _) = relative_pose_procrustes(&src, &dst, true).unwrap();
    let t = &r.transforms[&1];
    assert!((t.rotation - closed.rotation).abs().max() < 1e-4);
    assert!((t.scale - closed.scale).abs() < 1e-4);
    assert!((t.translation - closed.translation).abs().max() < 1e-4);
}

#[test]
fn global_similarity_is_composed_in() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut truth = vec![SimilarityTransform::identity()];
    truth.extend((0..2).map(|_| random_sim3(&mut rng)));
    let g = scene(&truth, 3, GraphStrategy::Exhaustive);
    let base = global_alignment(&g, &AlignOptions::default()).unwrap();
    let s = random_sim3(&mut rng);
    let mut moved = g.clone();
    for node in &mut moved.nodes {
        for p in &mut node.pointmap.points {
            *p = s.apply(*p);
        }
    }
    let r = global_alignment(&moved, &AlignOptions::default()).unwrap();
    // the reference is pinned, so T'_v = S T_v S⁻¹
    for (v, t) in &base.transforms {
        let want = s.compose(t).compose(&s.inverse());
        assert_close(&r.transforms[v], &want);
    }
    assert!((r.residual - base.residual).abs() < 1e-6);
}

#[test]
fn noisy_alignment_objective_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut truth = vec![SimilarityTransform::identity()];
    truth.extend((0..3).map(|_| random_sim3(&mut rng)));
    let mut g = scene(&truth, 2, GraphStrategy::Exhaustive);
    for node in g.nodes.iter_mut().skip(1) {
        for p in &mut node.pointmap.points {
            for c in p.iter_mut() {
                *c += rng.random_range(-0.02..0.02);
            }
        }
    }
    let r = global_alignment(&g, &AlignOptions::default()).unwrap();
    assert!(r.objective_history.len() > 1);
    assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
    assert!(r.objective_history.last() < r.objective_history.first());
    assert_eq!(r.transforms[&0], SimilarityTransform::identity());
    let capped = global_alignment(&g, &AlignOptions { max_iterations: 1, ..AlignOptions::default() }).unwrap();
    assert!(!capped.converged);
    assert_eq!(capped.iterations, 1);
}

#[test]
fn degenerate_edge_is_rejected() {
    let truth = [SimilarityTransform::identity(); 2];
    let mut g = scene(&truth, 0, GraphStrategy::Exhaustive);
    g.edges[0].matches.matches.pairs.truncate(2);
    assert!(global_alignment(&g, &AlignOptions::default()).is_err());
}

#[test]
fn fused_planar_views_are_coplanar() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let truth = [SimilarityTransform::identity(), random_sim3(&mut rng)];
    let mut g = scene(&truth, 1, GraphStrategy::Exhaustive);
    // flatten the surface: z = 2 in the reference frame
    for (v, node) in g.nodes.iter_mut().enumerate() {
        for p in &mut node.pointmap.points {
            let w = truth[v].apply(*p);
            *p = truth[v].inverse().apply([w[0], w[1], 2.0]);
        }
    }
    let r = global_alignment(&g, &AlignOptions::default()).unwrap();
    let pts = fuse_pointcloud(&g, &r, None).unwrap();
    assert_eq!(pts.len(), 2 * SIDE * SIDE);
    // least-squares plane through the fused cloud
    let c = pts.iter().fold(Vector3::zeros(), |a, p| a + Vector3::from(p.position)) / pts.len() as f64;
    let mut cov = nalgebra::Matrix3::zeros();
    for p in &pts {
        let d = Vector3::from(p.position) - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let n = eig.eigenvectors.column(k);
    let worst = pts.iter().map(|p| (Vector3::from(p.position) - c).dot(&n).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "plane residual {worst}");
    assert_eq!(pts[SIDE * SIDE].color, [40, 0, 0]);
}
