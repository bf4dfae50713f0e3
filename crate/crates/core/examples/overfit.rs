//! Stage-1 overfit run on a small synthetic set, then stage 2.
//!
//! `cargo run --release -p pairgeo-core --example overfit -- [steps] [pairs] [batch] [lr]`

use std::time::Instant;

use pairgeo_core::matching::{match_recall_at_px, reciprocal_nn_match};
use pairgeo_core::metrics::eval_normals;
use pairgeo_core::model::{forward_pair, init_params, ModelConfig, Network, ParamStore, StageTag};
use pairgeo_core::synth::{generate_sample, SampleConfig, ViewPairSample};
use pairgeo_core::train::{sample_step, train, TrainSettings};

/// Mean recall@2px and mean normal error over `data`.
fn evaluate(net: &Network, params: &ParamStore, data: &[ViewPairSample]) -> (f64, f64) {
    let (mut recall, mut normal) = (0.0, 0.0);
    for s in data {
        let out = forward_pair(net, params, [&s.views[0].image, &s.views[1].image]).unwrap();
        let m = reciprocal_nn_match(
            &out[0].descriptors,
            &out[1].descriptors,
            &out[0].pointmap_local.mask,
            &out[1].pointmap_local.mask,
        )
        .unwrap();
        recall += match_recall_at_px(&m.matches, &s.matches, s.views[1].image.width, 2.0).unwrap();
        for v in 0..2 {
            normal += eval_normals(&out[v].normals, &s.views[v].normals).unwrap().mean_deg / 2.0;
        }
    }
    (recall / data.len() as f64, normal / data.len() as f64)
}

fn mean_loc(net: &Network, params: &ParamStore, data: &[ViewPairSample], st: &TrainSettings) -> f64 {
    let mut g = params.zeros_like();
    data.iter().map(|s| sample_step(net, params, s, st, 0.0, &mut g).unwrap().pts_loc.unwrap()).sum::<f64>()
        / data.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(500, |s| s.parse().unwrap());
    let pairs: u64 = args.get(2).map_or(50, |s| s.parse().unwrap());
    let batch: usize = args.get(3).map_or(4, |s| s.parse().unwrap());
    let lr: f64 = args.get(4).map_or(1e-3, |s| s.parse().unwrap());
    let data: Vec<ViewPairSample> = (0..pairs).map(|s| generate_sample(s, &SampleConfig::default()).unwrap()).collect();
    let cfg = ModelConfig::tiny();
    let init = init_params(&cfg, 0).unwrap();
    let net = Network::new(&cfg).unwrap();
    let mut st = TrainSettings::new(StageTag::Stage1, steps, 64);
    st.batch_size = batch;
    st.schedule.base_lr = lr;
    let before = mean_loc(&net, &init.params, &data, &st);

    let t = Instant::now();
    let run = train(&init, &data, &st).unwrap();
    assert!(run.failure.is_none(), "{:?}", run.failure);
    println!("stage 1: {steps} steps in {:.1?}", t.elapsed());
    for l in run.log.iter().step_by((steps / 10).max(1)) {
        println!(
            "  {:4} loc {:.4} glb {:.4} pts_n {:.4} match {:.4}",
            l.step,
            l.pts_loc.unwrap(),
            l.pts_glb.unwrap(),
            l.pts_n.unwrap(),
            l.matching.unwrap()
        );
    }
    let after = mean_loc(&net, &run.checkpoint.params, &data, &st);
    let (recall, normal) = evaluate(&net, &run.checkpoint.params, &data);
    println!(
        "pts_loc {before:.4} -> {after:.4} ({:.1}%), recall@2px {recall:.3}, normal error {normal:.2}°",
        100.0 * after / before
    );

    let mut st2 = TrainSettings::new(StageTag::Stage2, steps * 3 / 5, 64);
    st2.batch_size = batch;
    st2.schedule.base_lr = lr;
    let t = Instant::now();
    let run2 = train(&run.checkpoint, &data, &st2).unwrap();
    println!("stage 2: {} steps in {:.1?}", st2.steps, t.elapsed());
    let (recall, normal) = evaluate(&net, &run2.checkpoint.params, &data);
    println!("recall@2px {recall:.3}, normal error {normal:.2}°");
}
