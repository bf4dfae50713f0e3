//! Shared-weight encoder-decoder transformer with dense prediction heads.
//!
//! Both views go through one encoder and one decoder parameter set. Each
//! decoder block runs self-attention (with axial rotary encoding) over a
//! view's own tokens, then cross-attention whose keys and values always come
//! from the other view, then an MLP. The block is applied to both views in
//! the same step, so swapping the inputs swaps the outputs.
//!
//! Heads are a linear projection to `patch² · channels` per token followed
//! by pixel unshuffling:
//!
//! | head      | channels per pixel        | output activation |
//! |-----------|---------------------------|-------------------|
//! | pointmap  | 6 (local xyz, cross xyz)  | none              |
//! | normal    | 3                         | L2 normalization  |
//! | matching  | `descriptor_dim`          | L2 normalization  |
//! | depth     | 1                         | `exp`             |
//!
//! Parameter count, with `E = embed_dim`, `D = decoder_dim`, `M = mlp_ratio`,
//! `p = patch_size` and `C = 6 + 3 + descriptor_dim + 1`:
//!
//! ```text
//! patch embed     3p²E + E
//! encoder block   (4 + 2M)E² + (9 + M)E          × n_enc_blocks
//! encoder norm    2E
//! decoder embed   ED + D
//! decoder block   (8 + 2M)D² + (17 + M)D         × n_dec_blocks
//! decoder norm    2D
//! heads           p²C(D + 1)
//! ```

mod layers;
mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prelude::*;
use crate::rope::RopeConfig;

pub use layers::{gelu, gelu_backward, LN_EPS};
pub use network::{
    forward_pair, forward_pair_traced, patchify, DescriptorMap, ForwardTrace, HeadGrads, HeadOutputs, Network,
    TokenGrid,
};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub decoder_dim: usize,
    pub n_enc_blocks: usize,
    pub n_dec_blocks: usize,
    pub n_heads: usize,
    pub descriptor_dim: usize,
    pub rope: RopeConfig,
    pub train_resolution: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Adds a fixed sinusoidal code of each patch's normalized image
    /// position to the patch embedding. Rotary encoding alone only exposes
    /// relative offsets, while pointmap regression needs absolute pixel
    /// position. The code has no parameters.
    #[serde(default)]
    pub coord_embedding: bool,
}

impl ModelConfig {
    /// The desk-scale model: patch 16, width 128, two encoder and two
    /// decoder blocks, four heads, trained at 64 px.
    pub fn tiny() -> Self {
        ModelConfig {
            patch_size: 16,
            embed_dim: 128,
            decoder_dim: 128,
            n_enc_blocks: 2,
            n_dec_blocks: 2,
            n_heads: 4,
            descriptor_dim: 24,
            rope: RopeConfig::new(32, (4, 4)),
            train_resolution: 64,
            mlp_ratio: 4,
            coord_embedding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 {
            problems.push("patch_size must be positive".to_string());
        }
        if self.n_heads == 0 {
            problems.push("n_heads must be positive".to_string());
        } else {
            for (name, dim) in [("embed_dim", self.embed_dim), ("decoder_dim", self.decoder_dim)] {
                if dim == 0 || dim % self.n_heads != 0 {
                    problems.push(format!("{name} ({dim}) must be divisible by n_heads ({})", self.n_heads));
                } else if dim / self.n_heads != self.rope.head_dim {
                    problems.push(format!(
                        "{name} / n_heads = {} must equal rope.head_dim = {}",
                        dim / self.n_heads,
                        self.rope.head_dim
                    ));
                }
            }
        }
        if let Err(e) = self.rope.validate() {
            problems.push(e.to_string());
        }
        if self.patch_size > 0 && (self.train_resolution == 0 || self.train_resolution % self.patch_size != 0) {
            problems.push(format!(
                "patch_size ({}) must divide train_resolution ({})",
                self.patch_size, self.train_resolution
            ));
        } else if self.patch_size > 0 {
            let g = self.train_resolution / self.patch_size;
            if self.rope.train_grid != (g, g) {
                problems.push(format!(
                    "rope.train_grid {:?} must equal the training patch grid ({g}, {g})",
                    self.rope.train_grid
                ));
            }
        }
        if self.descriptor_dim == 0 {
            problems.push("descriptor_dim must be positive".to_string());
        }
        if self.mlp_ratio == 0 {
            problems.push("mlp_ratio must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// Closed-form parameter count (see the module docs).
    pub fn parameter_count(&self) -> usize {
        let (e, d, m, p2) = (self.embed_dim, self.decoder_dim, self.mlp_ratio, self.patch_size * self.patch_size);
        let c = 6 + 3 + self.descriptor_dim + 1;
        3 * p2 * e
            + e
            + self.n_enc_blocks * ((4 + 2 * m) * e * e + (9 + m) * e)
            + 2 * e
            + e * d
            + d
            + self.n_dec_blocks * ((8 + 2 * m) * d * d + (17 + m) * d)
            + 2 * d
            + p2 * c * (d + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in architecture order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| self.get(id))
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Rounds every value to the nearest float32; checkpoints store float32.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// Rebuilds a store in architecture order from named tensors, checking
    /// that every expected tensor is present once with the expected shape.
    pub fn from_named(expected: &ParamStore, mut named: Vec<(String, Tensor)>) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, reference) in expected.iter() {
            let pos =
                named.iter().position(|(n, _)| n == name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            let (n, t) = named.swap_remove(pos);
            if t.shape != reference.shape || t.data.len() != reference.numel() {
                return Err(Error::TensorShape {
                    name: n,
                    expected: format!("{:?}", reference.shape),
                    got: format!("{:?}", t.shape),
                });
            }
            out.push(n, t);
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::InvalidConfig(format!("unexpected parameter tensor `{extra}`")));
        }
        Ok(out)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffers share the parameter store layout.
pub type Grads = ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    Stage1,
    Stage2,
    HeadsOnly,
}

impl StageTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::HeadsOnly => "heads-only",
        }
    }
}

/// Adam moment estimates aligned with the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub stage: StageTag,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network> {
        Network::new(&self.config)
    }
}

/// Initial weights: truncated normal (std 0.02, cut at 2 std) for every
/// linear weight, zero biases, unit layer-norm gains. Deterministic in `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let net = Network::new(cfg)?;
    let mut params = net.empty_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    for (name, t) in params.names.iter().zip(params.tensors.iter_mut()) {
        if name.ends_with(".weight") && t.shape.len() == 2 {
            for x in t.data.iter_mut() {
                *x = loop {
                    let s: f64 = normal.sample(&mut rng);
                    if s.abs() <= 0.04 {
                        break s;
                    }
                };
            }
        } else if name.ends_with(".weight") {
            t.data.iter_mut().for_each(|x| *x = 1.0);
        }
    }
    params.round_to_f32();
    Ok(Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: *cfg,
        stage: StageTag::Stage1,
        params,
        optimizer: None,
    })
}
