//! Command-line surface.
//!
//! Every subcommand accepts `--config FILE` (JSON) and any number of
//! `--set dotted.key=value` overrides; the named flags are shorthands for
//! the most common keys and are applied before `--set`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::commands::{emit, gen_data, infer, run_align, run_eval, run_match, run_train};
use crate::config::{resolve, AlignConfig, EvalConfig, GenDataConfig, InferConfig, MatchConfig, TrainConfig};
use crate::error::Result;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "pairgeo",
    version,
    about = "Dense two-view geometry: data, training, inference, alignment, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file; keys mirror the command's config struct.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key by dotted path, e.g. `matching.tau=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render synthetic view pairs into sample directories.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a checkpoint (stage1, stage2 or heads-only).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        init_checkpoint: Option<PathBuf>,
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict pointmaps, normals, depth and descriptors for an image pair.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PNG")]
        image1: Option<PathBuf>,
        #[arg(long, value_name = "PNG")]
        image2: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Match a sample's two views and score against its ground truth.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        sample: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Align several views into one frame and export a fused point cloud.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PNG", num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground-truth sample directories.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        pred: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        gt: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
}

fn json_str(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("plain values serialize")
}

/// Shorthand flags as `key=value` overrides, followed by `--set` entries.
fn overrides(common: &Common, flags: Vec<(&str, Option<String>)>) -> Vec<String> {
    flags.into_iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))).chain(common.set.iter().cloned()).collect()
}

fn load<T: Serialize + DeserializeOwned + Default>(common: &Common, flags: Vec<(&str, Option<String>)>) -> Result<T> {
    resolve(common.config.as_deref(), &overrides(common, flags))
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(json_str)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, seed, n, out } => {
            let cfg: GenDataConfig = load(
                &common,
                vec![("seed", seed.map(|s| s.to_string())), ("n", n.map(|n| n.to_string())), ("out", path_flag(&out))],
            )?;
            let dirs = gen_data(&cfg)?;
            emit(&format!("wrote {} samples to {}\n", dirs.len(), cfg.out.display()));
        }
        Command::Train { common, dataset, output, init_checkpoint, stage, steps, seed } => {
            let cfg: TrainConfig = load(
                &common,
                vec![
                    ("dataset", path_flag(&dataset)),
                    ("output", path_flag(&output)),
                    ("init_checkpoint", path_flag(&init_checkpoint)),
                    ("stage", stage.map(|s| json_str(&s))),
                    ("steps", steps.map(|s| s.to_string())),
                    ("seed", seed.map(|s| s.to_string())),
                ],
            )?;
            let summary = run_train(&cfg)?;
            if let Some(last) = summary.log.last() {
                emit(&format!("{}\n", json_str(last)));
            }
            emit(&format!(
                "trained {} steps ({}), checkpoint {}\n",
                summary.log.len(),
                summary.checkpoint.stage.as_str(),
                cfg.output.display()
            ));
        }
        Command::Infer { common, checkpoint, image1, image2, out } => {
            let cfg: InferConfig = load(
                &common,
                vec![
                    ("checkpoint", path_flag(&checkpoint)),
                    ("image1", path_flag(&image1)),
                    ("image2", path_flag(&image2)),
                    ("out", path_flag(&out)),
                ],
            )?;
            infer(&cfg)?;
            emit(&format!("wrote predictions to {}\n", cfg.out.display()));
        }
        Command::Match { common, checkpoint, sample, out } => {
            let cfg: MatchConfig = load(
                &common,
                vec![("checkpoint", path_flag(&checkpoint)), ("sample", path_flag(&sample)), ("out", path_flag(&out))],
            )?;
            let report = run_match(&cfg)?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")));
        }
        Command::Align { common, checkpoint, images, out } => {
            let images = (!images.is_empty()).then(|| json_str(&images));
            let cfg: AlignConfig = load(
                &common,
                vec![("checkpoint", path_flag(&checkpoint)), ("images", images), ("out", path_flag(&out))],
            )?;
            let (report, _) = run_align(&cfg)?;
            emit(&format!(
                "aligned {} views: residual {:.6}, {} iterations, converged {}\n",
                report.views.len(),
                report.residual,
                report.iterations,
                report.converged
            ));
            if !report.converged {
                eprintln!("warning: alignment stopped before reaching the convergence tolerance");
            }
        }
        Command::Eval { common, pred, gt, report } => {
            let cfg: EvalConfig = load(
                &common,
                vec![("pred", path_flag(&pred)), ("gt", path_flag(&gt)), ("report", path_flag(&report))],
            )?;
            let report = run_eval(&cfg)?;
            emit(&report.to_table());
            emit(&format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")));
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
