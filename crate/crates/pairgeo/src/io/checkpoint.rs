//! Checkpoint container.
//!
//! ```text
//! b"PGCKPT\0\0"       magic
//! u64 LE             header length in bytes
//! JSON header        schema_version, config, stage, optimizer_step,
//!                    tensors: name -> {dtype, shape, offset}
//! payload            float32 LE tensors; offsets are relative to the
//!                    first payload byte
//! ```
//!
//! Optimizer moments are stored as extra tensors named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use pairgeo_core::model::{
    Checkpoint, ModelConfig, Network, OptimizerState, ParamStore, StageTag, Tensor, CHECKPOINT_SCHEMA_VERSION,
};
use serde::{Deserialize, Serialize};

use super::{read_file, write_file};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PGCKPT\0\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub stage: StageTag,
    pub optimizer_step: Option<u64>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn all_tensors(ckpt: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = ckpt.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(opt) = &ckpt.optimizer {
        out.extend(opt.m.iter().map(|(n, t)| (format!("adam.m/{n}"), t)));
        out.extend(opt.v.iter().map(|(n, t)| (format!("adam.v/{n}"), t)));
    }
    out
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = all_tensors(ckpt);
    let mut directory = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in &tensors {
        let entry = TensorEntry { dtype: "f32".into(), shape: t.shape.clone(), offset: payload.len() as u64 };
        if directory.insert(name.clone(), entry).is_some() {
            return Err(Error::field(name.clone(), "duplicate tensor name"));
        }
        payload.extend(t.data.iter().flat_map(|v| (*v as f32).to_le_bytes()));
    }
    let header = CheckpointHeader {
        schema_version: ckpt.schema_version,
        config: ckpt.config,
        stage: ckpt.stage,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        tensors: directory,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::field("header", e))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &checkpoint_bytes(ckpt)?)
}

/// Parses the header without touching the payload.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::field("magic", "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::field("header", "truncated"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len]).map_err(|e| Error::field("header", e))?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found: header.schema_version, expected: CHECKPOINT_SCHEMA_VERSION });
    }
    Ok((header, &body[len..]))
}

fn take_tensors(header: &CheckpointHeader, payload: &[u8], prefix: &str) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for (name, entry) in &header.tensors {
        let Some(stripped) = name.strip_prefix(prefix) else { continue };
        if prefix.is_empty() && name.starts_with("adam.") {
            continue;
        }
        if entry.dtype != "f32" {
            return Err(Error::field(name.clone(), format!("unsupported dtype {}", entry.dtype)));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * count;
        if end > payload.len() {
            return Err(Error::field(name.clone(), "payload out of range"));
        }
        let data =
            payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        out.push((stripped.to_string(), Tensor { shape: entry.shape.clone(), data }));
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = read_header(bytes)?;
    let expected: ParamStore = Network::new(&header.config)?.empty_params();
    let params = ParamStore::from_named(&expected, take_tensors(&header, payload, "")?)?;
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => Some(OptimizerState {
            step,
            m: ParamStore::from_named(&expected, take_tensors(&header, payload, "adam.m/")?)?,
            v: ParamStore::from_named(&expected, take_tensors(&header, payload, "adam.v/")?)?,
        }),
    };
    Ok(Checkpoint {
        schema_version: header.schema_version,
        config: header.config,
        stage: header.stage,
        params,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&read_file(path)?)
}
