use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pairgeo::io::checkpoint::{load_checkpoint, save_checkpoint};
use pairgeo::io::outputs::read_outputs;
use pairgeo_core::model::{init_params, ModelConfig};

fn pairgeo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairgeo")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn gen(cwd: &Path, out: &str, n: usize) {
    let o = pairgeo(
        &[
            "gen-data",
            "--seed",
            "0",
            "--n",
            &n.to_string(),
            "--out",
            out,
            "--set",
            "sample.cameras.width=64",
            "--set",
            "sample.cameras.height=64",
        ],
        cwd,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "a", 10);
    gen(tmp.path(), "b", 10);
    let a = read_dir_sorted(&tmp.path().join("a"));
    let samples: Vec<_> = a.iter().filter(|p| p.is_dir()).collect();
    assert_eq!(samples.len(), 10);
    for dir in samples {
        let twin = tmp.path().join("b").join(dir.file_name().unwrap());
        for f in read_dir_sorted(dir) {
            assert_eq!(fs::read(&f).unwrap(), fs::read(twin.join(f.file_name().unwrap())).unwrap(), "{}", f.display());
        }
    }
}

#[test]
fn eval_of_identical_directories_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 2);
    let o = pairgeo(&["eval", "--pred", "d", "--gt", "d", "--report", "r.json"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["samples"], 2);
    for k in ["mean_deg", "median_deg"] {
        assert_eq!(r["normals"][k], 0.0);
    }
    for k in ["delta_11_25", "delta_22_5", "delta_30"] {
        assert_eq!(r["normals"][k], 100.0);
    }
    for k in ["rel", "rmse"] {
        assert_eq!(r["depth"][k], 0.0);
    }
    for k in ["delta1", "delta2", "delta3"] {
        assert_eq!(r["depth"][k], 100.0);
    }
    assert_eq!(r["match_recall"], 1.0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("depth d1 (%)") && table.contains("100.0000"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pairgeo(&["train", "--config", "missing.json"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    let o = pairgeo(&["frobnicate"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&pairgeo(&[], tmp.path())), 1);
    assert_eq!(code(&pairgeo(&["train", "--bogus-flag"], tmp.path())), 1);
    for sub in ["gen-data", "train", "infer", "match", "align", "eval"] {
        let o = pairgeo(&[sub, "--help"], tmp.path());
        assert_eq!(code(&o), 0, "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("--config"), "{sub}");
    }
}

#[test]
fn bad_override_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pairgeo(&["gen-data", "--set", "no_such_key=1"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn stage_prerequisites_are_enforced() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 1);
    let o = pairgeo(&["train", "--dataset", "d", "--stage", "stage2", "--steps", "1"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage1"));
    let ckpt = init_params(&ModelConfig::tiny(), 0).unwrap();
    save_checkpoint(&ckpt, &tmp.path().join("s1.pgck")).unwrap();
    let o = pairgeo(
        &["train", "--dataset", "d", "--stage", "heads-only", "--init-checkpoint", "s1.pgck", "--steps", "1"],
        tmp.path(),
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_step_training_keeps_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 1);
    let o = pairgeo(
        &[
            "train",
            "--dataset",
            "d",
            "--steps",
            "0",
            "--output",
            "c.pgck",
            "--set",
            "resolution_schedule=[[0,64]]",
            "--set",
            "log=log.jsonl",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = load_checkpoint(&tmp.path().join("c.pgck")).unwrap();
    assert_eq!(ckpt, init_params(&ModelConfig::tiny(), 0).unwrap());
    assert_eq!(fs::read(tmp.path().join("log.jsonl")).unwrap(), b"");
}

#[test]
fn training_from_config_file_writes_log_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 2);
    let cfg = serde_json::json!({
        "dataset": "d",
        "output": "out/c.pgck",
        "log": "log.jsonl",
        "steps": 3,
        "batch_size": 1,
        "model": {"descriptor_dim": 8},
        "resolution_schedule": [[0, 32], [2, 64]]
    });
    fs::write(tmp.path().join("train.json"), cfg.to_string()).unwrap();
    let o = pairgeo(&["train", "--config", "train.json"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(tmp.path().join("log.jsonl")).unwrap();
    let res: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["resolution"].as_u64().unwrap())
        .collect();
    assert_eq!(res, vec![32, 32, 64]);
    assert_eq!(load_checkpoint(&tmp.path().join("out/c.pgck")).unwrap().config.descriptor_dim, 8);
}

#[test]
fn infer_is_deterministic_and_visualizations_match_input() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 1);
    save_checkpoint(&init_params(&ModelConfig::tiny(), 3).unwrap(), &tmp.path().join("c.pgck")).unwrap();
    let img = |v: u32| format!("d/sample_00000/image_{v}.png");
    for out in ["o1", "o2"] {
        let o = pairgeo(
            &["infer", "--checkpoint", "c.pgck", "--image1", &img(0), "--image2", &img(1), "--out", out],
            tmp.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in read_dir_sorted(&tmp.path().join("o1")) {
        let twin = tmp.path().join("o2").join(f.file_name().unwrap());
        assert_eq!(fs::read(&f).unwrap(), fs::read(twin).unwrap(), "{}", f.display());
    }
    for name in ["normal_vis_0.png", "depth_vis_1.png"] {
        let im = image::open(tmp.path().join("o1").join(name)).unwrap();
        assert_eq!((im.width(), im.height()), (64, 64));
    }
    let (outs, _) = read_outputs(&tmp.path().join("o1")).unwrap();
    assert_eq!(outs[0].width(), 64);
    let o = pairgeo(&["eval", "--pred", "o1", "--gt", "d/sample_00000"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn infer_pads_odd_sizes_and_crops_back() {
    let tmp = tempfile::tempdir().unwrap();
    save_checkpoint(&init_params(&ModelConfig::tiny(), 3).unwrap(), &tmp.path().join("c.pgck")).unwrap();
    for name in ["a.png", "b.png"] {
        image::RgbImage::from_fn(65, 40, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, 7]))
            .save(tmp.path().join(name))
            .unwrap();
    }
    let o = pairgeo(
        &["infer", "--checkpoint", "c.pgck", "--image1", "a.png", "--image2", "b.png", "--out", "o"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let im = image::open(tmp.path().join("o/depth_vis_0.png")).unwrap();
    assert_eq!((im.width(), im.height()), (65, 40));
    assert_eq!(fs::metadata(tmp.path().join("o/depth_0.bin")).unwrap().len(), 4 * 65 * 40);
}

#[test]
fn match_and_align_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "d", 1);
    save_checkpoint(&init_params(&ModelConfig::tiny(), 3).unwrap(), &tmp.path().join("c.pgck")).unwrap();
    let o = pairgeo(&["match", "--checkpoint", "c.pgck", "--sample", "d/sample_00000", "--out", "m"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("m/match_report.json")).unwrap()).unwrap();
    assert!(r["recall"].as_f64().unwrap() >= 0.0);
    let o = pairgeo(
        &[
            "align",
            "--checkpoint",
            "c.pgck",
            "--images",
            "d/sample_00000/image_0.png",
            "d/sample_00000/image_1.png",
            "--out",
            "a",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("a/alignment.json")).unwrap()).unwrap();
    assert_eq!(r["reference"], 0);
    assert_eq!(
        r["views"][0]["matrix"],
        serde_json::json!([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    );
    assert!(r["residual"].as_f64().unwrap().is_finite());
    assert!(fs::metadata(tmp.path().join("a/pointcloud.ply")).unwrap().len() > 0);
}

#[test]
fn worker_count_does_not_change_generated_data() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |out: &str, workers: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_pairgeo"))
            .args([
                "gen-data",
                "--seed",
                "4",
                "--n",
                "3",
                "--out",
                out,
                "--set",
                "sample.cameras.width=64",
                "--set",
                "sample.cameras.height=64",
            ])
            .env("GEO_NUM_WORKERS", workers)
            .current_dir(tmp.path())
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
    };
    run("one", "1");
    run("three", "3");
    for d in ["sample_00000", "sample_00002"] {
        let a = tmp.path().join("one").join(d).join("depth_1.bin");
        let b = tmp.path().join("three").join(d).join("depth_1.bin");
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
}
