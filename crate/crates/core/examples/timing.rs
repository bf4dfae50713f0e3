use std::time::Instant;

use pairgeo_core::losses::{loss_match_infonce, MatchLossConfig};
use pairgeo_core::model::{init_params, ModelConfig, Network, StageTag};
use pairgeo_core::synth::{generate_sample, SampleConfig};
use pairgeo_core::train::{sample_step, TrainSettings};

fn main() {
    let s = generate_sample(0, &SampleConfig::default()).unwrap();
    let cfg = ModelConfig::tiny();
    let ck = init_params(&cfg, 0).unwrap();
    let net = Network::new(&cfg).unwrap();
    let n = 20;
    let t = Instant::now();
    for _ in 0..n {
        let _ = net.forward_traced(&ck.params, [&s.views[0].image, &s.views[1].image]).unwrap();
    }
    println!("forward {:?}", t.elapsed() / n);
    let out = net.forward_traced(&ck.params, [&s.views[0].image, &s.views[1].image]).unwrap();
    let o = out.outputs();
    let t = Instant::now();
    for _ in 0..n {
        let _ =
            loss_match_infonce(&o[0].descriptors, &o[1].descriptors, &s.matches, &MatchLossConfig::default()).unwrap();
    }
    println!("infonce {:?} ({} matches)", t.elapsed() / n, s.matches.len());
    let st = TrainSettings::new(StageTag::Stage1, 1, 64);
    let mut g = ck.params.zeros_like();
    let t = Instant::now();
    for _ in 0..n {
        sample_step(&net, &ck.params, &s, &st, 1.0, &mut g).unwrap();
    }
    println!("sample_step {:?}", t.elapsed() / n);
}
