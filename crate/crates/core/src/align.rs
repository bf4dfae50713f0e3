//! Multi-view fusion: pairwise inference over a view graph, per-view sim(3)
//! alignment anchored on matched pixels, and fused coloured point clouds.
//!
//! The alignment minimizes
//!
//! ```text
//! E = Σ_edges 1/|M_e| Σ_(i,j)∈M_e  huber_δ(‖T_v(P_v(i)) − T_w(P_w(j))‖)
//! ```
//!
//! over one similarity transform per view, with the lowest view id pinned
//! to the identity. It starts from a spanning-tree chain of closed-form
//! Procrustes fits and refines by gradient descent with backtracking on
//! left-multiplicative updates `(log s, ω, t)`.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose_procrustes, Pointmap, Vec3};
use crate::linalg::{cross, dot, norm, sub};
use crate::matching::{reciprocal_nn_match, MatchResult};
use crate::model::{forward_pair, HeadOutputs, Network, ParamStore};
use crate::prelude::*;
use crate::sim3::SimilarityTransform;
use crate::synth::{CorrespondenceSet, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphStrategy {
    Exhaustive,
    Star(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewEdge {
    pub a: u32,
    pub b: u32,
    /// Pixel `i` of view `a` matched to pixel `j` of view `b`.
    pub matches: MatchResult,
    pub outputs: Option<Box<[HeadOutputs; 2]>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewNode {
    pub id: u32,
    /// Local pointmap used for alignment and fusion.
    pub pointmap: Pointmap,
    pub colors: Vec<[u8; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewGraph {
    pub nodes: Vec<ViewNode>,
    pub edges: Vec<ViewEdge>,
}

fn image_colors(img: &Image) -> Vec<[u8; 3]> {
    img.data.chunks_exact(3).map(|c| [0, 1, 2].map(|k| (c[k].clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
}

/// Pairs selected by `strategy` over `n` views, lower id first.
pub fn graph_pairs(n: usize, strategy: GraphStrategy) -> Result<Vec<(u32, u32)>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("a view graph needs at least 2 views, got {n}")));
    }
    let n = n as u32;
    Ok(match strategy {
        GraphStrategy::Exhaustive => (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect(),
        GraphStrategy::Star(c) => {
            if c >= n {
                return Err(Error::InvalidConfig(format!("star centre {c} out of range for {n} views")));
            }
            (0..n).filter(|v| *v != c).map(|v| (c.min(v), c.max(v))).collect()
        }
    })
}

impl ViewGraph {
    /// Graph from known pointmaps and matches; edges are `(a, b, matches)`.
    pub fn from_parts(nodes: Vec<ViewNode>, edges: Vec<(u32, u32, CorrespondenceSet)>) -> Result<Self> {
        let ids: BTreeSet<u32> = nodes.iter().map(|n| n.id).collect();
        if ids.len() != nodes.len() {
            return Err(Error::InvalidConfig("duplicate view id".into()));
        }
        let mut out = Vec::with_capacity(edges.len());
        for (a, b, m) in edges {
            if a == b {
                return Err(Error::InvalidConfig(format!("self edge on view {a}")));
            }
            if !ids.contains(&a) || !ids.contains(&b) {
                return Err(Error::InvalidConfig(format!("edge ({a}, {b}) references an unknown view")));
            }
            let scores = vec![1.0; m.len()];
            out.push(ViewEdge { a, b, matches: MatchResult { matches: m, scores }, outputs: None });
        }
        let mut nodes = nodes;
        nodes.sort_by_key(|n| n.id);
        Ok(ViewGraph { nodes, edges: out })
    }

    fn node(&self, id: u32) -> &ViewNode {
        self.nodes.iter().find(|n| n.id == id).expect("edge endpoints are nodes")
    }

    pub fn is_connected(&self) -> bool {
        let Some(first) = self.nodes.first() else { return true };
        let mut seen = BTreeSet::from([first.id]);
        let mut queue = VecDeque::from([first.id]);
        while let Some(v) = queue.pop_front() {
            for e in &self.edges {
                if e.matches.matches.is_empty() {
                    continue;
                }
                let other = if e.a == v {
                    e.b
                } else if e.b == v {
                    e.a
                } else {
                    continue;
                };
                if seen.insert(other) {
                    queue.push_back(other);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    /// Matched point pairs of an edge, restricted to valid pixels.
    fn edge_points(&self, e: &ViewEdge) -> (Vec<Vec3>, Vec<Vec3>) {
        let (pa, pb) = (&self.node(e.a).pointmap, &self.node(e.b).pointmap);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for &(i, j) in &e.matches.matches.pairs {
            let (i, j) = (i as usize, j as usize);
            if i < pa.points.len() && j < pb.points.len() && pa.mask.get(i) && pb.mask.get(j) {
                src.push(pa.points[i]);
                dst.push(pb.points[j]);
            }
        }
        (src, dst)
    }
}

/// Pairwise inference and mutual-nearest-neighbour matching on every
/// selected edge. Each view keeps the local pointmap of the first edge that
/// contains it. Edges with fewer than 3 matches are dropped.
pub fn build_view_graph(
    net: &Network,
    params: &ParamStore,
    views: &[Image],
    strategy: GraphStrategy,
) -> Result<ViewGraph> {
    let pairs = graph_pairs(views.len(), strategy)?;
    let mut nodes: BTreeMap<u32, ViewNode> = BTreeMap::new();
    let mut edges = Vec::new();
    for (a, b) in pairs {
        let out = forward_pair(net, params, [&views[a as usize], &views[b as usize]])?;
        let m = reciprocal_nn_match(
            &out[0].descriptors,
            &out[1].descriptors,
            &out[0].pointmap_local.mask,
            &out[1].pointmap_local.mask,
        )?;
        for (v, o) in [(a, &out[0]), (b, &out[1])] {
            nodes.entry(v).or_insert_with(|| ViewNode {
                id: v,
                pointmap: o.pointmap_local.clone(),
                colors: image_colors(&views[v as usize]),
            });
        }
        if m.matches.len() >= 3 {
            edges.push(ViewEdge { a, b, matches: m, outputs: Some(Box::new(out)) });
        }
    }
    let graph = ViewGraph { nodes: nodes.into_values().collect(), edges };
    if !graph.is_connected() {
        return Err(Error::Disconnected);
    }
    Ok(graph)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_step: f64,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions { huber_delta: 0.1, max_iterations: 2000, relative_tolerance: 1e-8, initial_step: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Per view id, the transform into the reference view's frame.
    pub transforms: BTreeMap<u32, SimilarityTransform>,
    pub reference: u32,
    /// RMS distance between aligned matched points.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step (starting point first).
    pub objective_history: Vec<f64>,
}

struct Problem {
    /// `(index of a, index of b, points of a, points of b, 1/|M|)`.
    edges: Vec<(usize, usize, Vec<Vec3>, Vec<Vec3>, f64)>,
    delta: f64,
}

impl Problem {
    fn huber(&self, r: f64) -> f64 {
        if r <= self.delta {
            0.5 * r * r
        } else {
            self.delta * (r - 0.5 * self.delta)
        }
    }

    fn objective(&self, t: &[SimilarityTransform]) -> f64 {
        let mut e = 0.0;
        for (a, b, pa, pb, w) in &self.edges {
            let mut s = 0.0;
            for (p, q) in pa.iter().zip(pb) {
                s += self.huber(norm(sub(t[*a].apply(*p), t[*b].apply(*q))));
            }
            e += w * s;
        }
        e
    }

    /// Gradient with respect to left-multiplicative `(σ, ω, τ)` per view.
    fn gradient(&self, t: &[SimilarityTransform]) -> Vec<[f64; 7]> {
        let mut g = vec![[0.0; 7]; t.len()];
        for (a, b, pa, pb, w) in &self.edges {
            for (p, q) in pa.iter().zip(pb) {
                let (xa, xb) = (t[*a].apply(*p), t[*b].apply(*q));
                let r = sub(xa, xb);
                let n = norm(r);
                if n == 0.0 {
                    continue;
                }
                let k = if n <= self.delta { 1.0 } else { self.delta / n };
                let gr = [w * k * r[0], w * k * r[1], w * k * r[2]];
                for (v, x, s) in [(*a, xa, 1.0), (*b, xb, -1.0)] {
                    let rot = cross(x, gr);
                    let gv = &mut g[v];
                    gv[0] += s * dot(gr, x);
                    for c in 0..3 {
                        gv[1 + c] += s * rot[c];
                        gv[4 + c] += s * gr[c];
                    }
                }
            }
        }
        g
    }

    fn rms(&self, t: &[SimilarityTransform]) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (a, b, pa, pb, _) in &self.edges {
            for (p, q) in pa.iter().zip(pb) {
                let d = norm(sub(t[*a].apply(*p), t[*b].apply(*q)));
                s += d * d;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (s / n as f64).sqrt()
        }
    }
}

fn retract(t: &SimilarityTransform, xi: &[f64; 7], step: f64) -> SimilarityTransform {
    let d = SimilarityTransform::from_log(
        -step * xi[0],
        Vector3::new(-step * xi[1], -step * xi[2], -step * xi[3]),
        Vector3::new(-step * xi[4], -step * xi[5], -step * xi[6]),
    );
    d.compose(t).renormalized()
}

/// Solves for per-view similarity transforms. Returns a result flagged
/// `converged: false` if the iteration cap is reached first.
pub fn global_alignment(graph: &ViewGraph, opts: &AlignOptions) -> Result<AlignmentResult> {
    if graph.nodes.is_empty() {
        return Err(Error::EmptyValidSet("view graph"));
    }
    if !graph.is_connected() {
        return Err(Error::Disconnected);
    }
    if !(opts.huber_delta > 0.0) || !(opts.initial_step > 0.0) {
        return Err(Error::InvalidConfig("huber_delta and initial_step must be positive".into()));
    }
    let index: BTreeMap<u32, usize> = graph.nodes.iter().enumerate().map(|(k, n)| (n.id, k)).collect();
    let reference = graph.nodes[0].id;
    let mut edges = Vec::with_capacity(graph.edges.len());
    for e in &graph.edges {
        let (pa, pb) = graph.edge_points(e);
        if pa.len() < 3 {
            return Err(Error::InsufficientMatches { needed: 3, got: pa.len() });
        }
        let w = 1.0 / pa.len() as f64;
        edges.push((index[&e.a], index[&e.b], pa, pb, w));
    }
    let problem = Problem { edges, delta: opts.huber_delta };

    // Spanning-tree initialization from the reference view.
    let n = graph.nodes.len();
    let mut t: Vec<Option<SimilarityTransform>> = vec![None; n];
    t[0] = Some(SimilarityTransform::identity());
    let mut queue = VecDeque::from([0usize]);
    while let Some(v) = queue.pop_front() {
        for (a, b, pa, pb, _) in &problem.edges {
            let (other, src, dst) = if *a == v && t[*b].is_none() {
                (*b, pb, pa)
            } else if *b == v && t[*a].is_none() {
                (*a, pa, pb)
            } else {
                continue;
            };
            // other -> v, then v -> reference
            let (rel, _) = relative_pose_procrustes(src, dst, true)?;
            t[other] = Some(t[v].expect("visited").compose(&rel));
            queue.push_back(other);
        }
    }
    let mut t: Vec<SimilarityTransform> = t.into_iter().map(|x| x.expect("connected")).collect();

    let mut e = problem.objective(&t);
    let mut history = vec![e];
    let mut step = opts.initial_step;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        if e <= f64::MIN_POSITIVE {
            converged = true;
            break;
        }
        iterations += 1;
        let g = problem.gradient(&t);
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<SimilarityTransform> =
                t.iter().enumerate().map(|(k, tk)| if k == 0 { *tk } else { retract(tk, &g[k], step) }).collect();
            let et = problem.objective(&trial);
            if et <= e {
                accepted = Some((trial, et));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, et)) = accepted else {
            converged = true;
            break;
        };
        let rel = (e - et) / e.max(f64::MIN_POSITIVE);
        t = trial;
        e = et;
        history.push(e);
        step = (step * 2.0).min(opts.initial_step * 1e6);
        if rel < opts.relative_tolerance {
            converged = true;
            break;
        }
    }
    let residual = problem.rms(&t);
    let transforms = graph.nodes.iter().zip(t).map(|(node, tk)| (node.id, tk)).collect();
    Ok(AlignmentResult { transforms, reference, residual, iterations, converged, objective_history: history })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColoredPoint {
    pub position: Vec3,
    pub color: [u8; 3],
}

/// All valid local points mapped into the reference frame, optionally
/// averaged per cubic voxel of edge `voxel_size`.
pub fn fuse_pointcloud(
    graph: &ViewGraph,
    alignment: &AlignmentResult,
    voxel_size: Option<f64>,
) -> Result<Vec<ColoredPoint>> {
    let mut pts = Vec::new();
    for node in &graph.nodes {
        let t = alignment
            .transforms
            .get(&node.id)
            .ok_or_else(|| Error::InvalidConfig(format!("no transform for view {}", node.id)))?;
        for i in node.pointmap.mask.valid_indices() {
            let color = node.colors.get(i).copied().unwrap_or([255; 3]);
            pts.push(ColoredPoint { position: t.apply(node.pointmap.points[i]), color });
        }
    }
    let Some(size) = voxel_size else { return Ok(pts) };
    if !(size > 0.0) {
        return Err(Error::InvalidConfig(format!("voxel size must be positive, got {size}")));
    }
    let mut cells: BTreeMap<[i64; 3], ([f64; 3], [u32; 3], u32)> = BTreeMap::new();
    for p in &pts {
        let key = p.position.map(|c| (c / size).floor() as i64);
        let cell = cells.entry(key).or_insert(([0.0; 3], [0; 3], 0));
        for k in 0..3 {
            cell.0[k] += p.position[k];
            cell.1[k] += p.color[k] as u32;
        }
        cell.2 += 1;
    }
    Ok(cells
        .into_values()
        .map(|(s, c, n)| ColoredPoint {
            position: s.map(|x| x / n as f64),
            color: c.map(|x| ((x as f64) / n as f64).round() as u8),
        })
        .collect())
}
