//! Subcommand implementations. Each takes a resolved config and returns a
//! small summary; printing is left to the CLI layer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use pairgeo_core::align::{build_view_graph, fuse_pointcloud, global_alignment, AlignmentResult};
use pairgeo_core::geometry::{DepthMap, Frame, Mask, NormalMap, Pointmap};
use pairgeo_core::matching::{match_recall_at_px, pose_from_matches, reciprocal_nn_match};
use pairgeo_core::metrics::{eval_depth, MetricAccumulator, MetricReport};
use pairgeo_core::model::{forward_pair, init_params, Checkpoint, HeadOutputs, StageTag};
use pairgeo_core::pad::{crop_outputs, pad_to_patch_multiple};
use pairgeo_core::synth::{generate_sample, CorrespondenceSet, Image, ViewPairSample};
use pairgeo_core::train::{train, StepLog};
use serde::{Deserialize, Serialize};

use crate::config::{num_workers, AlignConfig, EvalConfig, GenDataConfig, InferConfig, MatchConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint};
use crate::io::outputs::{write_outputs, OutputsMeta};
use crate::io::ply::export_ply;
use crate::io::sample::{
    list_sample_dirs, read_matches, read_sample, read_sample_meta, sample_dir_name, write_sample, SampleMeta,
};
use crate::io::{read_f32, read_json, read_mask, read_png_rgb, write_file, write_json};

/// Runs `job(i)` for `i in 0..n` on up to `workers` threads and returns the
/// results in index order.
fn parallel_map<T: Send>(n: usize, workers: usize, job: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&job).collect();
    }
    let job = &job;
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w..n).step_by(workers).map(|i| (i, job(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

/// Writes `cfg.n` sample directories. Sample `i` uses seed `cfg.seed + i`.
pub fn gen_data(cfg: &GenDataConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let dirs = parallel_map(cfg.n, num_workers(), |i| {
        let sample = generate_sample(cfg.seed + i as u64, &cfg.sample)?;
        let dir = cfg.out.join(sample_dir_name(i));
        write_sample(&sample, &dir)?;
        Ok(dir)
    })?;
    write_json(&cfg.out.join("dataset.json"), cfg)?;
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<ViewPairSample>> {
    let dirs = list_sample_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::field("dataset", format!("no sample directories under {}", root.display())));
    }
    parallel_map(dirs.len(), num_workers(), |i| read_sample(&dirs[i]))
}

pub struct TrainSummary {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

/// Starting point for `cfg`: the given checkpoint, or a fresh
/// initialization for stage 1.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    match (&cfg.init_checkpoint, cfg.stage) {
        (Some(path), _) => load_checkpoint(path),
        (None, StageTag::Stage1) => Ok(init_params(&cfg.model, cfg.init_seed)?),
        (None, StageTag::Stage2) => Err(Error::Config("stage2 training requires a stage1 init_checkpoint".into())),
        (None, StageTag::HeadsOnly) => {
            Err(Error::Config("heads-only training requires a stage2 init_checkpoint".into()))
        }
    }
}

/// Trains and writes the checkpoint and log. When a step fails, the last
/// good checkpoint is still written before the error is returned.
pub fn run_train(cfg: &TrainConfig) -> Result<TrainSummary> {
    let init = initial_checkpoint(cfg)?;
    let settings = cfg.settings();
    settings.validate(init.config.patch_size)?;
    let data = load_dataset(&cfg.dataset)?;
    let run = train(&init, &data, &settings)?;
    if let Some(dir) = cfg.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(&run.checkpoint, &cfg.output)?;
    if let Some(path) = &cfg.log {
        let mut text = Vec::new();
        for entry in &run.log {
            serde_json::to_writer(&mut text, entry).map_err(|e| Error::field("log", e))?;
            text.push(b'\n');
        }
        write_file(path, &text)?;
    }
    match run.failure {
        Some(e) => Err(e.into()),
        None => Ok(TrainSummary { checkpoint: run.checkpoint, log: run.log }),
    }
}

/// Forward pass on an image pair of any size; inputs are zero-padded to a
/// patch multiple and the outputs cropped back.
pub fn predict_pair(ckpt: &Checkpoint, images: [&Image; 2]) -> Result<[HeadOutputs; 2]> {
    if (images[0].width, images[0].height) != (images[1].width, images[1].height) {
        return Err(Error::field(
            "image2",
            format!(
                "size {}x{} differs from image1 {}x{}",
                images[1].width, images[1].height, images[0].width, images[0].height
            ),
        ));
    }
    let net = ckpt.network()?;
    let (p0, size) = pad_to_patch_multiple(images[0], ckpt.config.patch_size);
    let (p1, _) = pad_to_patch_multiple(images[1], ckpt.config.patch_size);
    let [o0, o1] = forward_pair(&net, &ckpt.params, [&p0, &p1])?;
    Ok([crop_outputs(&o0, size)?, crop_outputs(&o1, size)?])
}

fn positive_depth_mask(o: &HeadOutputs) -> Result<Mask> {
    let bits =
        o.pointmap_local.points.iter().zip(o.pointmap_local.mask.bits()).map(|(p, m)| *m && p[2] > 0.0).collect();
    Ok(Mask::new(o.width(), o.height(), bits)?)
}

pub fn match_outputs(outs: &[HeadOutputs; 2]) -> Result<CorrespondenceSet> {
    let m = reciprocal_nn_match(
        &outs[0].descriptors,
        &outs[1].descriptors,
        &positive_depth_mask(&outs[0])?,
        &positive_depth_mask(&outs[1])?,
    )?;
    Ok(m.matches)
}

pub fn infer(cfg: &InferConfig) -> Result<[HeadOutputs; 2]> {
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    let a = read_png_rgb(&cfg.image1, "image1")?;
    let b = read_png_rgb(&cfg.image2, "image2")?;
    let outs = predict_pair(&ckpt, [&a, &b])?;
    write_outputs(&outs, &match_outputs(&outs)?, &cfg.out)?;
    Ok(outs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matches: usize,
    pub recall: Option<f64>,
    pub radius_px: f64,
    /// Larger of the rotation and translation-direction errors, in degrees.
    pub pose_error_deg: Option<f64>,
}

pub fn run_match(cfg: &MatchConfig) -> Result<MatchReport> {
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    let sample = read_sample(&cfg.sample)?;
    let outs = predict_pair(&ckpt, [&sample.views[0].image, &sample.views[1].image])?;
    let matches = match_outputs(&outs)?;
    let (w, _) = sample.resolution();
    let recall = if sample.matches.is_empty() {
        None
    } else {
        Some(match_recall_at_px(&matches, &sample.matches, w, cfg.radius_px)?)
    };
    let gt_pose = sample.views[0].pose.relative_to(&sample.views[1].pose);
    let pose_error_deg = pose_from_matches(&outs[0].pointmap_local, &outs[1].pointmap_local, &matches)
        .ok()
        .map(|p| p.errors(&gt_pose).max());
    let report = MatchReport { matches: matches.len(), recall, radius_px: cfg.radius_px, pose_error_deg };
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_file(&cfg.out.join("matches.bin"), &crate::io::sample::match_bytes(&matches))?;
    write_json(&cfg.out.join("match_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewTransformReport {
    pub view: u32,
    pub image: PathBuf,
    pub scale: f64,
    /// Row-major 4×4 similarity matrix into the reference frame.
    pub matrix: [[f64; 4]; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub reference: u32,
    pub views: Vec<ViewTransformReport>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub edges: Vec<(u32, u32, usize)>,
    pub points: usize,
}

pub fn run_align(cfg: &AlignConfig) -> Result<(AlignmentReport, AlignmentResult)> {
    let ckpt = load_checkpoint(&cfg.checkpoint)?;
    let images = cfg
        .images
        .iter()
        .enumerate()
        .map(|(i, p)| read_png_rgb(p, &format!("images.{i}")))
        .collect::<Result<Vec<_>>>()?;
    let patch = ckpt.config.patch_size;
    let padded: Vec<Image> = images.iter().map(|im| pad_to_patch_multiple(im, patch).0).collect();
    if padded.windows(2).any(|w| (w[0].width, w[0].height) != (w[1].width, w[1].height)) {
        return Err(Error::field("images", "all views must share one size"));
    }
    let mut graph = build_view_graph(&ckpt.network()?, &ckpt.params, &padded, cfg.graph)?;
    if let Some(first) = images.first() {
        let size = pairgeo_core::pad::OriginalSize { width: first.width, height: first.height };
        for node in &mut graph.nodes {
            node.pointmap = crop_pointmap(&node.pointmap, size)?;
            node.colors = crop_rows(&node.colors, padded[0].width, size);
        }
        for e in &mut graph.edges {
            let w = padded[0].width;
            let inside = |p: u32| (p as usize % w) < size.width && (p as usize / w) < size.height;
            let remap = |p: u32| ((p as usize / w) * size.width + p as usize % w) as u32;
            let keep: Vec<usize> = (0..e.matches.matches.len())
                .filter(|&k| {
                    let (a, b) = e.matches.matches.pairs[k];
                    inside(a) && inside(b)
                })
                .collect();
            e.matches.scores = keep.iter().map(|&k| e.matches.scores[k]).collect();
            e.matches.matches.pairs = keep
                .iter()
                .map(|&k| {
                    let (a, b) = e.matches.matches.pairs[k];
                    (remap(a), remap(b))
                })
                .collect();
            e.outputs = None;
        }
    }
    let result = global_alignment(&graph, &cfg.options)?;
    let cloud = fuse_pointcloud(&graph, &result, cfg.voxel_size)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    export_ply(&cloud, &cfg.out.join("pointcloud.ply"))?;
    let views = result
        .transforms
        .iter()
        .map(|(id, t)| {
            let mut matrix = [[0.0; 4]; 4];
            for r in 0..3 {
                for c in 0..3 {
                    matrix[r][c] = t.scale * t.rotation[(r, c)];
                }
                matrix[r][3] = t.translation[r];
            }
            matrix[3][3] = 1.0;
            ViewTransformReport { view: *id, image: cfg.images[*id as usize].clone(), scale: t.scale, matrix }
        })
        .collect();
    let report = AlignmentReport {
        reference: result.reference,
        views,
        residual: result.residual,
        iterations: result.iterations,
        converged: result.converged,
        edges: graph.edges.iter().map(|e| (e.a, e.b, e.matches.matches.len())).collect(),
        points: cloud.len(),
    };
    write_json(&cfg.out.join("alignment.json"), &report)?;
    Ok((report, result))
}

fn crop_rows<T: Copy>(data: &[T], width: usize, to: pairgeo_core::pad::OriginalSize) -> Vec<T> {
    (0..to.height).flat_map(|y| data[y * width..y * width + to.width].iter().copied()).collect()
}

fn crop_pointmap(pm: &Pointmap, to: pairgeo_core::pad::OriginalSize) -> Result<Pointmap> {
    let bits = crop_rows(pm.mask.bits(), pm.width, to);
    Ok(Pointmap::new(
        to.width,
        to.height,
        crop_rows(&pm.points, pm.width, to),
        pm.frame,
        Mask::new(to.width, to.height, bits)?,
    )?)
}

/// Per-view depth, normals and mask from a sample or inference directory,
/// plus matches and, for inference directories, local pointmaps.
struct Prediction {
    depth: [DepthMap; 2],
    normals: [NormalMap; 2],
    matches: Option<CorrespondenceSet>,
    pointmaps: Option<[Pointmap; 2]>,
}

fn read_prediction(dir: &Path, gt: &ViewPairSample) -> Result<Prediction> {
    let (w, h) = if dir.join("outputs.json").is_file() {
        let m: OutputsMeta = read_json(&dir.join("outputs.json"), "outputs")?;
        (m.resolution[0], m.resolution[1])
    } else {
        let m: SampleMeta = read_sample_meta(dir)?;
        (m.resolution[0], m.resolution[1])
    };
    if (w, h) != gt.resolution() {
        return Err(Error::field("resolution", format!("prediction {w}x{h} vs ground truth {:?}", gt.resolution())));
    }
    let n = w * h;
    let mut depth = Vec::new();
    let mut normals = Vec::new();
    for v in 0..2u32 {
        let mask = read_mask(&dir.join(format!("mask_{v}.png")), "mask", w, h)?;
        let d = read_f32(&dir.join(format!("depth_{v}.bin")), "depth", n)?;
        let nm = read_f32(&dir.join(format!("normal_{v}.bin")), "normal", 3 * n)?;
        depth.push(DepthMap::new(w, h, d, mask.clone())?);
        normals.push(NormalMap::new(
            w,
            h,
            nm.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            Frame::View(v),
            mask,
        )?);
    }
    let matches = if dir.join("matches.bin").is_file() { Some(read_matches(&dir.join("matches.bin"))?) } else { None };
    let pointmaps = if dir.join("pointmap_local_0.bin").is_file() {
        let mut pms = Vec::new();
        for v in 0..2u32 {
            let flat = read_f32(&dir.join(format!("pointmap_local_{v}.bin")), "pointmap_local", 3 * n)?;
            let pts = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            pms.push(Pointmap::new(w, h, pts, Frame::View(v), depth[v as usize].mask.clone())?);
        }
        Some(pms)
    } else {
        None
    };
    let [d0, d1]: [DepthMap; 2] = depth.try_into().map_err(|_| Error::field("depth", "expected two views"))?;
    let [n0, n1]: [NormalMap; 2] = normals.try_into().map_err(|_| Error::field("normal", "expected two views"))?;
    let pointmaps = pointmaps.map(|p: Vec<Pointmap>| {
        let [a, b]: [Pointmap; 2] = p.try_into().expect("two views");
        [a, b]
    });
    Ok(Prediction { depth: [d0, d1], normals: [n0, n1], matches, pointmaps })
}

/// `root` itself when it is a sample or output directory, otherwise its
/// sample sub-directories.
fn eval_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("meta.json").is_file() || root.join("outputs.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file() || p.join("outputs.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn run_eval(cfg: &EvalConfig) -> Result<MetricReport> {
    let gt_dirs = eval_dirs(&cfg.gt)?;
    let pred_dirs = eval_dirs(&cfg.pred)?;
    if gt_dirs.is_empty() {
        return Err(Error::field("gt", format!("no samples under {}", cfg.gt.display())));
    }
    let pairs: Vec<(PathBuf, PathBuf)> = if gt_dirs.len() == 1 && pred_dirs.len() == 1 {
        vec![(pred_dirs[0].clone(), gt_dirs[0].clone())]
    } else {
        gt_dirs
            .iter()
            .map(|g| {
                let name = g.file_name().expect("listed directory");
                let p = cfg.pred.join(name);
                if p.is_dir() {
                    Ok((p, g.clone()))
                } else {
                    Err(Error::field("pred", format!("missing prediction for {}", name.to_string_lossy())))
                }
            })
            .collect::<Result<_>>()?
    };
    let partials = parallel_map(pairs.len(), num_workers(), |i| {
        let (pred_dir, gt_dir) = &pairs[i];
        let gt = read_sample(gt_dir)?;
        let pred = read_prediction(pred_dir, &gt)?;
        let mut acc = MetricAccumulator::default();
        for v in 0..2 {
            acc.add_normals(&pred.normals[v], &gt.views[v].normals)?;
            acc.add_depth(eval_depth(&pred.depth[v], &gt.views[v].depth, cfg.depth_alignment)?);
        }
        if let Some(m) = &pred.matches {
            if !gt.matches.is_empty() {
                acc.add_recall(match_recall_at_px(m, &gt.matches, gt.resolution().0, cfg.radius_px)?);
            }
            if let Some(pms) = &pred.pointmaps {
                if let Ok(est) = pose_from_matches(&pms[0], &pms[1], m) {
                    let gt_pose = gt.views[0].pose.relative_to(&gt.views[1].pose);
                    acc.add_pose_error(est.errors(&gt_pose).max());
                }
            }
        }
        acc.finish_sample();
        Ok(acc)
    })?;
    let mut total = MetricAccumulator::default();
    for p in partials {
        total.merge(p);
    }
    let report = total.report(cfg.depth_alignment, cfg.radius_px, &cfg.auc_thresholds)?;
    if let Some(path) = &cfg.report {
        write_json(path, &report)?;
    }
    Ok(report)
}

/// Writes a line to stdout, ignoring broken pipes.
pub fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}
