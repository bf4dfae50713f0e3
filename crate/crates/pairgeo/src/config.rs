//! JSON configuration for every subcommand.
//!
//! A command's configuration starts from its defaults, is deep-merged with
//! the config file (if any) and then with dotted-path overrides such as
//! `train.steps=200` or `matching.tau=5`. Override values are parsed as JSON
//! and fall back to plain strings, so `out=runs/a` and `seed=3` both work.
//!
//! Learning rates, batch sizes, resolutions and the matching temperature
//! are desk-scale choices, not values from any reference training run.

use std::path::{Path, PathBuf};

use pairgeo_core::align::{AlignOptions, GraphStrategy};
use pairgeo_core::losses::{MatchLossConfig, StageWeights};
use pairgeo_core::metrics::DepthAlignment;
use pairgeo_core::model::{ModelConfig, StageTag};
use pairgeo_core::optim::{AdamConfig, LrSchedule};
use pairgeo_core::synth::{CameraSampler, SampleConfig};
use pairgeo_core::train::{ResolutionSchedule, TrainSettings};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    /// Number of sample directories to write.
    pub n: usize,
    pub out: PathBuf,
    pub sample: SampleConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            seed: 0,
            n: 10,
            out: PathBuf::from("data"),
            sample: SampleConfig {
                cameras: CameraSampler { width: 128, height: 128, ..CameraSampler::default() },
                ..SampleConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: StageTag,
    pub dataset: PathBuf,
    /// Starting checkpoint. Required for stage 2 and heads-only; stage 1
    /// initializes from `model` and `init_seed` when it is absent.
    pub init_checkpoint: Option<PathBuf>,
    pub output: PathBuf,
    /// Per-step JSON lines log.
    pub log: Option<PathBuf>,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub batch_size: usize,
    pub steps: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub resolution_schedule: ResolutionSchedule,
    pub weights: StageWeights,
    pub matching: MatchLossConfig,
    /// Parameter-name prefixes trained in heads-only mode; everything else
    /// is frozen.
    pub trainable_heads: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = TrainSettings::new(StageTag::Stage1, 500, 64);
        TrainConfig {
            stage: s.stage,
            dataset: PathBuf::from("data"),
            init_checkpoint: None,
            output: PathBuf::from("checkpoint.pgck"),
            log: None,
            model: ModelConfig::tiny(),
            init_seed: 0,
            batch_size: s.batch_size,
            steps: s.steps,
            schedule: s.schedule,
            adam: s.adam,
            seed: s.seed,
            resolution_schedule: ResolutionSchedule(vec![(0, 64), (400, 128)]),
            weights: s.weights,
            matching: s.matching,
            trainable_heads: s.trainable_heads,
        }
    }
}

impl TrainConfig {
    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            stage: self.stage,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            schedule: self.schedule,
            adam: self.adam,
            resolution_schedule: self.resolution_schedule.clone(),
            weights: self.weights,
            matching: self.matching,
            trainable_heads: self.trainable_heads.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub checkpoint: PathBuf,
    pub image1: PathBuf,
    pub image2: PathBuf,
    pub out: PathBuf,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            checkpoint: PathBuf::from("checkpoint.pgck"),
            image1: PathBuf::from("image_0.png"),
            image2: PathBuf::from("image_1.png"),
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    pub checkpoint: PathBuf,
    /// Sample directory providing `image_{0,1}.png` and, for scoring,
    /// ground-truth geometry and matches.
    pub sample: PathBuf,
    pub out: PathBuf,
    pub radius_px: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            checkpoint: PathBuf::from("checkpoint.pgck"),
            sample: PathBuf::from("sample"),
            out: PathBuf::from("matches"),
            radius_px: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub checkpoint: PathBuf,
    /// View images; view ids follow list order.
    pub images: Vec<PathBuf>,
    pub out: PathBuf,
    pub graph: GraphStrategy,
    pub options: AlignOptions,
    /// Voxel edge length for downsampling the fused cloud.
    pub voxel_size: Option<f64>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            checkpoint: PathBuf::from("checkpoint.pgck"),
            images: Vec::new(),
            out: PathBuf::from("aligned"),
            graph: GraphStrategy::Exhaustive,
            options: AlignOptions::default(),
            voxel_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Prediction root: a sample-format directory or a directory of them.
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub depth_alignment: DepthAlignment,
    pub radius_px: f64,
    pub auc_thresholds: Vec<f64>,
    /// Where to write the JSON report; stdout always gets the table.
    pub report: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pred: PathBuf::from("pred"),
            gt: PathBuf::from("gt"),
            depth_alignment: DepthAlignment::MedianScale,
            radius_px: 2.0,
            auc_thresholds: vec![5.0, 10.0, 20.0],
            report: None,
        }
    }
}

/// Recursively merges `patch` into `base`; objects merge key by key and
/// everything else is replaced.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `a.b.c=value` override.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) =
        spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    if path.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize =
                    key.parse().map_err(|_| Error::Config(format!("`{path}`: `{key}` is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("`{path}`: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("`{path}`: `{key}` is not inside an object"))),
        };
    }
    unreachable!("loop returns on the last key")
}

/// Defaults, then the file at `path`, then `overrides` in order.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(T::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, file);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

/// `GEO_NUM_WORKERS`, at least 1, default 1.
pub fn num_workers() -> usize {
    std::env::var("GEO_NUM_WORKERS").ok().and_then(|v| v.parse().ok()).filter(|n: &usize| *n >= 1).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut v = json!({"a": {"b": 1}, "list": [1, 2]});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "a.c=hello").unwrap();
        apply_override(&mut v, "list.1=7").unwrap();
        assert_eq!(v, json!({"a": {"b": 2.5, "c": "hello"}, "list": [1, 7]}));
        assert!(apply_override(&mut v, "list.9=0").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let c: TrainConfig = resolve(None, &[]).unwrap();
        assert_eq!(c, TrainConfig::default());
        let c: TrainConfig = resolve(None, &["steps=7".into(), "matching.tau=3".into()]).unwrap();
        assert_eq!((c.steps, c.matching.tau), (7, 3.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve::<TrainConfig>(None, &["stepz=7".into()]).is_err());
    }
}
