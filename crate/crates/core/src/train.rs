//! Two-stage training with a coarse-to-fine resolution schedule and
//! heads-only fine-tuning, over an in-memory set of view pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NormalMap, Pointmap, Vec3};
use crate::losses::{
    loss_depth_log_si, loss_match_infonce, loss_normal_direct, loss_pts_global, loss_pts_local, loss_pts_normal,
    MatchLossConfig, PairNormals, PairPointmaps, StageWeights,
};
use crate::model::{Checkpoint, Grads, HeadGrads, Network, ParamStore, StageTag};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::prelude::*;
use crate::synth::ViewPairSample;

/// `(first step, resolution)` entries; the active resolution at step `s` is
/// that of the last entry whose step is `<= s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSchedule(pub Vec<(usize, usize)>);

impl ResolutionSchedule {
    pub fn constant(resolution: usize) -> Self {
        ResolutionSchedule(vec![(0, resolution)])
    }

    pub fn resolution_at(&self, step: usize) -> usize {
        self.0.iter().take_while(|(s, _)| *s <= step).last().map(|e| e.1).unwrap_or(self.0[0].1)
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.0.is_empty() || self.0[0].0 != 0 {
            return Err(Error::InvalidConfig("resolution schedule must start at step 0".into()));
        }
        if self.0.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidConfig("resolution schedule steps must increase".into()));
        }
        for (_, r) in &self.0 {
            if *r == 0 || r % patch_size != 0 {
                return Err(Error::InvalidConfig(format!(
                    "resolution {r} is not a multiple of patch_size {patch_size}"
                )));
            }
        }
        Ok(())
    }
}

fn default_heads_only_selector() -> Vec<String> {
    vec!["head.depth".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub stage: StageTag,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub resolution_schedule: ResolutionSchedule,
    pub weights: StageWeights,
    pub matching: MatchLossConfig,
    /// Parameter-name prefixes trained in heads-only mode.
    #[serde(default = "default_heads_only_selector")]
    pub trainable_heads: Vec<String>,
}

impl TrainSettings {
    pub fn new(stage: StageTag, steps: usize, resolution: usize) -> Self {
        TrainSettings {
            stage,
            steps,
            batch_size: 4,
            seed: 0,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            resolution_schedule: ResolutionSchedule::constant(resolution),
            weights: StageWeights::default(),
            matching: MatchLossConfig::default(),
            trainable_heads: default_heads_only_selector(),
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        self.schedule.validate()?;
        self.resolution_schedule.validate(patch_size)?;
        self.weights.validate()?;
        self.matching.validate()?;
        if self.stage == StageTag::HeadsOnly && self.trainable_heads.iter().any(|p| !p.starts_with("head.")) {
            return Err(Error::InvalidConfig("heads-only selectors must name head parameters (`head.*`)".into()));
        }
        Ok(())
    }
}

/// Loss components of one step, averaged over the batch. Components that
/// are not part of the active objective are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub resolution: usize,
    pub lr: f64,
    pub total: f64,
    pub pts_loc: Option<f64>,
    pub pts_glb: Option<f64>,
    pub pts_n: Option<f64>,
    pub matching: Option<f64>,
    pub normal: Option<f64>,
    pub depth: Option<f64>,
}

/// Which tensors the optimizer may touch.
pub fn trainable_mask(params: &ParamStore, stage: StageTag, heads: &[String]) -> Vec<bool> {
    params
        .names()
        .iter()
        .map(|n| match stage {
            StageTag::Stage1 => !n.starts_with("head.normal") && !n.starts_with("head.depth"),
            StageTag::Stage2 => !n.starts_with("head.matching") && !n.starts_with("head.depth"),
            StageTag::HeadsOnly => heads.iter().any(|p| n.starts_with(p.as_str())),
        })
        .collect()
}

fn selected(heads: &[String], head: &str) -> bool {
    heads.iter().any(|p| head.starts_with(p.as_str()) || p.starts_with(head))
}

fn scale(v: &mut [Vec3], s: f64) {
    for p in v {
        for c in p.iter_mut() {
            *c *= s;
        }
    }
}

fn add_scaled(acc: &mut Option<Vec<Vec3>>, g: &[Vec3], s: f64) {
    let a = acc.get_or_insert_with(|| vec![[0.0; 3]; g.len()]);
    for (x, y) in a.iter_mut().zip(g) {
        for k in 0..3 {
            x[k] += s * y[k];
        }
    }
}

/// Forward, losses and backward for one sample. Gradients are scaled by
/// `weight` and accumulated into `grads`; returns the unweighted components.
pub fn sample_step(
    net: &Network,
    params: &ParamStore,
    sample: &ViewPairSample,
    settings: &TrainSettings,
    weight: f64,
    grads: &mut Grads,
) -> Result<StepLog> {
    let stage = settings.stage;
    let heads = &settings.trainable_heads;
    let trace = net.forward_traced(params, [&sample.views[0].image, &sample.views[1].image])?;
    let out = trace.outputs();
    let gt_cross = [sample.cross_pointmap(0)?, sample.cross_pointmap(1)?];
    let gt_local = [&sample.views[0].pointmap, &sample.views[1].pointmap];
    let pred_local: Vec<Pointmap> =
        (0..2).map(|v| out[v].pointmap_local.with_mask(gt_local[v].mask.clone())).collect::<Result<_>>()?;
    let pred_cross: Vec<Pointmap> =
        (0..2).map(|v| out[v].pointmap_cross.with_mask(gt_cross[v].mask.clone())).collect::<Result<_>>()?;
    let pred = PairPointmaps { local: [&pred_local[0], &pred_local[1]], cross: [&pred_cross[0], &pred_cross[1]] };
    let gt = PairPointmaps { local: gt_local, cross: [&gt_cross[0], &gt_cross[1]] };
    let w = &settings.weights;

    let mut log = StepLog::default();
    let mut hg: [HeadGrads; 2] = [HeadGrads::default(), HeadGrads::default()];
    let mut total = 0.0;

    let use_points = stage != StageTag::HeadsOnly || selected(heads, "head.pointmap");
    if use_points {
        let (w_glb, w_n) = match stage {
            StageTag::Stage1 => (w.eta1, w.eta2),
            _ => (w.lambda1, w.lambda2),
        };
        let gt_cross_n = [sample.cross_normals(0)?, sample.cross_normals(1)?];
        let gt_n = PairNormals {
            local: [&sample.views[0].normals, &sample.views[1].normals],
            cross: [&gt_cross_n[0], &gt_cross_n[1]],
        };
        let loc = loss_pts_local(&pred, &gt)?;
        let glb = loss_pts_global(&pred, &gt)?;
        let pn = loss_pts_normal(&pred, &gt_n)?;
        for (name, value) in [("pts_loc", loc.value), ("pts_glb", glb.value), ("pts_n", pn.value)] {
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss component `{name}` is {value}")));
            }
        }
        total += loc.value + w_glb * glb.value + w_n * pn.value;
        log.pts_loc = Some(loc.value);
        log.pts_glb = Some(glb.value);
        log.pts_n = Some(pn.value);
        for v in 0..2 {
            for (l, s) in [(&loc, 1.0), (&glb, w_glb), (&pn, w_n)] {
                add_scaled(&mut hg[v].pointmap_local, &l.grad.local[v], s * weight);
                add_scaled(&mut hg[v].pointmap_cross, &l.grad.cross[v], s * weight);
            }
        }
    }
    let use_match = match stage {
        StageTag::Stage1 => true,
        StageTag::Stage2 => false,
        StageTag::HeadsOnly => selected(heads, "head.matching"),
    };
    if use_match {
        let l = loss_match_infonce(&out[0].descriptors, &out[1].descriptors, &sample.matches, &settings.matching)?;
        if !l.value.is_finite() {
            return Err(Error::NonFinite(format!("loss component `match` is {}", l.value)));
        }
        let s = if stage == StageTag::Stage1 { w.eta3 } else { 1.0 };
        total += s * l.value;
        log.matching = Some(l.value);
        let [g0, g1] = l.grad;
        hg[0].descriptors = Some(g0.into_iter().map(|x| x * s * weight).collect());
        hg[1].descriptors = Some(g1.into_iter().map(|x| x * s * weight).collect());
    }
    let use_normal = match stage {
        StageTag::Stage1 => false,
        StageTag::Stage2 => true,
        StageTag::HeadsOnly => selected(heads, "head.normal"),
    };
    if use_normal {
        let pred_n: Vec<NormalMap> = (0..2)
            .map(|v| {
                let n = &out[v].normals;
                NormalMap::new(n.width, n.height, n.normals.clone(), n.frame, sample.views[v].normals.mask.clone())
            })
            .collect::<Result<_>>()?;
        let l = loss_normal_direct([&pred_n[0], &pred_n[1]], [&sample.views[0].normals, &sample.views[1].normals])?;
        if !l.value.is_finite() {
            return Err(Error::NonFinite(format!("loss component `normal` is {}", l.value)));
        }
        let s = if stage == StageTag::Stage2 { w.lambda3 } else { 1.0 };
        total += s * l.value;
        log.normal = Some(l.value);
        let [mut g0, mut g1] = l.grad;
        scale(&mut g0, s * weight);
        scale(&mut g1, s * weight);
        hg[0].normals = Some(g0);
        hg[1].normals = Some(g1);
    }
    if stage == StageTag::HeadsOnly && selected(heads, "head.depth") {
        let mut sum = 0.0;
        for v in 0..2 {
            let gt_d = &sample.views[v].depth;
            let l = loss_depth_log_si(&out[v].depth.depth, &gt_d.depth, &gt_d.mask)?;
            sum += l.value;
            hg[v].depth = Some(l.grad.into_iter().map(|x| x * weight).collect());
        }
        if !sum.is_finite() {
            return Err(Error::NonFinite(format!("loss component `depth` is {sum}")));
        }
        total += sum;
        log.depth = Some(sum);
    }
    net.backward(params, grads, &trace, &hg, stage != StageTag::HeadsOnly)?;
    log.total = total;
    Ok(log)
}

fn check_stage_transition(from: StageTag, to: StageTag) -> Result<()> {
    let ok = match to {
        StageTag::Stage1 => from == StageTag::Stage1,
        StageTag::Stage2 => matches!(from, StageTag::Stage1 | StageTag::Stage2),
        StageTag::HeadsOnly => matches!(from, StageTag::Stage2 | StageTag::HeadsOnly),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{} training cannot start from a {} checkpoint", to.as_str(), from.as_str())))
    }
}

/// Result of [`train`]. On failure `checkpoint` holds the parameters from
/// before the failing step.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub failure: Option<Error>,
}

/// Per-resolution copies of the dataset, subsampled from the finest one.
fn datasets_per_resolution(
    data: &[ViewPairSample],
    schedule: &ResolutionSchedule,
) -> Result<Vec<(usize, Vec<ViewPairSample>)>> {
    let mut out: Vec<(usize, Vec<ViewPairSample>)> = Vec::new();
    for &(_, res) in &schedule.0 {
        if out.iter().any(|(r, _)| *r == res) {
            continue;
        }
        let mut set = Vec::with_capacity(data.len());
        for s in data {
            let (w, h) = s.resolution();
            if w % res != 0 {
                return Err(Error::InvalidConfig(format!("dataset width {w} is not a multiple of resolution {res}")));
            }
            let f = w / res;
            if h % f != 0 {
                return Err(Error::InvalidConfig(format!("dataset height {h} is not divisible by factor {f}")));
            }
            set.push(s.subsampled(f)?);
        }
        out.push((res, set));
    }
    Ok(out)
}

/// Runs `settings.steps` optimizer steps starting from `init`.
pub fn train(init: &Checkpoint, data: &[ViewPairSample], settings: &TrainSettings) -> Result<TrainRun> {
    init.config.validate()?;
    settings.validate(init.config.patch_size)?;
    check_stage_transition(init.stage, settings.stage)?;
    if settings.steps == 0 {
        return Ok(TrainRun { checkpoint: init.clone(), log: Vec::new(), failure: None });
    }
    if data.is_empty() {
        return Err(Error::EmptyValidSet("training dataset"));
    }
    let net = Network::new(&init.config)?;
    let sets = datasets_per_resolution(data, &settings.resolution_schedule)?;
    let mut params = init.params.clone();
    let mut opt = match (&init.optimizer, init.stage == settings.stage) {
        (Some(state), true) => Adam::with_state(settings.adam, state.clone()),
        _ => Adam::new(settings.adam, &params),
    };
    let trainable = trainable_mask(&params, settings.stage, &settings.trainable_heads);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(settings.steps);
    let mut grads = params.zeros_like();
    let mut failure = None;
    for step in 0..settings.steps {
        let res = settings.resolution_schedule.resolution_at(step);
        let set = &sets.iter().find(|(r, _)| *r == res).expect("resolution prepared").1;
        let lr = settings.schedule.lr(step, settings.steps);
        grads.fill_zero();
        let mut entry = StepLog { step, resolution: res, lr, ..Default::default() };
        let b = settings.batch_size;
        let weight = 1.0 / b as f64;
        let mut err = None;
        for _ in 0..b {
            if order.is_empty() {
                order = (0..set.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            match sample_step(&net, &params, &set[idx], settings, weight, &mut grads) {
                Ok(l) => accumulate(&mut entry, &l, weight),
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = err {
            failure = Some(e);
            break;
        }
        if let Some((name, _)) = grads.iter().find(|(_, t)| t.data.iter().any(|x| !x.is_finite())) {
            failure = Some(Error::NonFinite(format!("gradient of `{name}`")));
            break;
        }
        opt.step(&mut params, &grads, lr, &trainable);
        log.push(entry);
    }
    let checkpoint = Checkpoint {
        schema_version: init.schema_version,
        config: init.config,
        stage: settings.stage,
        params,
        optimizer: Some(opt.state),
    };
    Ok(TrainRun { checkpoint, log, failure })
}

fn accumulate(entry: &mut StepLog, l: &StepLog, w: f64) {
    entry.total += w * l.total;
    for (acc, v) in [
        (&mut entry.pts_loc, l.pts_loc),
        (&mut entry.pts_glb, l.pts_glb),
        (&mut entry.pts_n, l.pts_n),
        (&mut entry.matching, l.matching),
        (&mut entry.normal, l.normal),
        (&mut entry.depth, l.depth),
    ] {
        if let Some(v) = v {
            *acc = Some(acc.unwrap_or(0.0) + w * v);
        }
    }
}
