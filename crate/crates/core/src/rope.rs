//! Axial 2D rotary position encoding with position interpolation.
//!
//! Each attention head splits its channels in two halves: the first half is
//! rotated by row positions, the second by column positions. Within a half,
//! channel pairs `(2k, 2k + 1)` rotate by `pos · base^(-2k / half)`.
//!
//! When a grid axis is longer than the axis the encoding was trained on,
//! positions along it are compressed by `train_len / infer_len` so that every
//! effective position stays inside the trained range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base_frequency: f64,
    /// `(rows, cols)` of the patch grid the encoding was trained at.
    pub train_grid: (usize, usize),
}

impl RopeConfig {
    pub fn new(head_dim: usize, train_grid: (usize, usize)) -> Self {
        RopeConfig { head_dim, base_frequency: 100.0, train_grid }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "rope head_dim must be a positive multiple of 4, got {}",
                self.head_dim
            )));
        }
        if !(self.base_frequency > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "rope base_frequency must be positive, got {}",
                self.base_frequency
            )));
        }
        if self.train_grid.0 == 0 || self.train_grid.1 == 0 {
            return Err(Error::InvalidConfig("rope train_grid components must be >= 1".into()));
        }
        Ok(())
    }
}

/// Angle table, row-major `positions.len() × dim / 2`.
pub fn rope_angles_1d(positions: &[f64], dim: usize, base: f64) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!("rotary dimension must be even, got {dim}")));
    }
    let half = dim / 2;
    let inv_freq: Vec<f64> = (0..half).map(|k| base.powf(-2.0 * k as f64 / dim as f64)).collect();
    let mut out = Vec::with_capacity(positions.len() * half);
    for p in positions {
        out.extend(inv_freq.iter().map(|f| p * f));
    }
    Ok(out)
}

/// Maps indices `m` to `m · L / L'` when `infer_len > train_len`, otherwise
/// returns them unchanged.
pub fn interpolated_positions(indices: &[usize], train_len: usize, infer_len: usize) -> Vec<f64> {
    if infer_len <= train_len {
        return indices.iter().map(|m| *m as f64).collect();
    }
    indices.iter().map(|m| (*m as f64) * (train_len as f64) / (infer_len as f64)).collect()
}

/// Precomputed cos/sin tables for one grid shape.
#[derive(Clone, Debug)]
pub struct AxialRope {
    rows: usize,
    cols: usize,
    head_dim: usize,
    /// Per token, `head_dim / 2` (cos, sin) pairs: the first `head_dim / 4`
    /// from the row axis, the rest from the column axis.
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl AxialRope {
    pub fn new(grid: (usize, usize), cfg: &RopeConfig) -> Result<Self> {
        cfg.validate()?;
        let (rows, cols) = grid;
        let axis_dim = cfg.head_dim / 2;
        let row_pos = interpolated_positions(&(0..rows).collect::<Vec<_>>(), cfg.train_grid.0, rows);
        let col_pos = interpolated_positions(&(0..cols).collect::<Vec<_>>(), cfg.train_grid.1, cols);
        let row_ang = rope_angles_1d(&row_pos, axis_dim, cfg.base_frequency)?;
        let col_ang = rope_angles_1d(&col_pos, axis_dim, cfg.base_frequency)?;
        let pairs = cfg.head_dim / 2;
        let quarter = axis_dim / 2;
        let mut cos = Vec::with_capacity(rows * cols * pairs);
        let mut sin = Vec::with_capacity(rows * cols * pairs);
        for r in 0..rows {
            for c in 0..cols {
                for a in row_ang[r * quarter..(r + 1) * quarter].iter().chain(&col_ang[c * quarter..(c + 1) * quarter])
                {
                    cos.push(a.cos());
                    sin.push(a.sin());
                }
            }
        }
        Ok(AxialRope { rows, cols, head_dim: cfg.head_dim, cos, sin })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Rotates every head of `tokens` (row-major `n_tokens × channels`,
    /// channels a multiple of `head_dim`) in place. `inverse` applies the
    /// transpose rotation, which is the backward pass.
    pub fn apply(&self, tokens: &mut [f64], channels: usize, inverse: bool) -> Result<()> {
        let n = self.rows * self.cols;
        if channels % self.head_dim != 0 || tokens.len() != n * channels {
            return Err(Error::shape("rope tokens", (n, channels), tokens.len()));
        }
        let pairs = self.head_dim / 2;
        let sign = if inverse { -1.0 } else { 1.0 };
        for t in 0..n {
            let cs = &self.cos[t * pairs..(t + 1) * pairs];
            let sn = &self.sin[t * pairs..(t + 1) * pairs];
            let row = &mut tokens[t * channels..(t + 1) * channels];
            for head in row.chunks_exact_mut(self.head_dim) {
                for k in 0..pairs {
                    let (x0, x1) = (head[2 * k], head[2 * k + 1]);
                    let (c, s) = (cs[k], sign * sn[k]);
                    head[2 * k] = x0 * c - x1 * s;
                    head[2 * k + 1] = x0 * s + x1 * c;
                }
            }
        }
        Ok(())
    }
}

/// One-shot form: rotates a `(rows·cols) × channels` token grid.
pub fn apply_axial_rope_2d(
    tokens: &[f64],
    channels: usize,
    grid: (usize, usize),
    cfg: &RopeConfig,
) -> Result<Vec<f64>> {
    if channels % cfg.head_dim != 0 {
        return Err(Error::shape("rope channels vs head_dim", cfg.head_dim, channels));
    }
    let rope = AxialRope::new(grid, cfg)?;
    let mut out = tokens.to_vec();
    rope.apply(&mut out, channels, false)?;
    Ok(out)
}
