//! Dense layers with explicit forward caches and backward passes.
//! Activations are row-major `tokens × channels` buffers.

use crate::linalg::{matmul, matmul_a_bt, matmul_at_b};
use crate::prelude::*;
use crate::rope::AxialRope;

use super::{Grads, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward(&self, p: &ParamStore, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(n * self.d_out);
        let b = &p.get(self.bias).data;
        for _ in 0..n {
            y.extend_from_slice(b);
        }
        matmul(x, &p.get(self.weight).data, &mut y, n, self.d_in, self.d_out, true);
        y
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
        self.backward_params(g, x, dy, n);
        let mut dx = vec![0.0; n * self.d_in];
        matmul_a_bt(dy, &p.get(self.weight).data, &mut dx, n, self.d_out, self.d_in, false);
        dx
    }

    pub fn backward_params(&self, g: &mut Grads, x: &[f64], dy: &[f64], n: usize) {
        matmul_at_b(x, dy, &mut g.get_mut(self.weight).data, self.d_in, n, self.d_out, true);
        let db = &mut g.get_mut(self.bias).data;
        for row in dy.chunks_exact(self.d_out) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

pub struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> (Vec<f64>, LnCache) {
        let d = self.dim;
        let (gamma, beta) = (&p.get(self.weight).data, &p.get(self.bias).data);
        let n = x.len() / d;
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(n);
        for t in 0..n {
            let row = &x[t * d..(t + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[t * d + c] = h;
                y[t * d + c] = h * gamma[c] + beta[c];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, cache: &LnCache, dy: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let gamma = &p.get(self.weight).data;
        {
            let dg = &mut g.get_mut(self.weight).data;
            for (row_dy, row_h) in dy.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
                for c in 0..d {
                    dg[c] += row_dy[c] * row_h[c];
                }
            }
        }
        {
            let db = &mut g.get_mut(self.bias).data;
            for row in dy.chunks_exact(d) {
                for c in 0..d {
                    db[c] += row[c];
                }
            }
        }
        let mut dx = vec![0.0; dy.len()];
        for (t, is) in cache.inv_std.iter().enumerate() {
            let h = &cache.xhat[t * d..(t + 1) * d];
            let gy = &dy[t * d..(t + 1) * d];
            let mut mean_g = 0.0;
            let mut mean_gh = 0.0;
            for c in 0..d {
                let gh = gy[c] * gamma[c];
                mean_g += gh;
                mean_gh += gh * h[c];
            }
            mean_g /= d as f64;
            mean_gh /= d as f64;
            for c in 0..d {
                dx[t * d + c] = is * (gy[c] * gamma[c] - mean_g - h[c] * mean_gh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())).collect()
}

pub fn gelu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(v, g)| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl Mlp {
    pub fn forward(&self, p: &ParamStore, x: &[f64], n: usize) -> (Vec<f64>, MlpCache) {
        let pre = self.fc1.forward(p, x, n);
        let act = gelu(&pre);
        let y = self.fc2.forward(p, &act, n);
        (y, MlpCache { x: x.to_vec(), pre, act })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut Grads, c: &MlpCache, dy: &[f64], n: usize) -> Vec<f64> {
        let dact = self.fc2.backward(p, g, &c.act, dy, n);
        let dpre = gelu_backward(&c.pre, &dact);
        self.fc1.backward(p, g, &c.x, &dpre, n)
    }
}

/// Multi-head scaled dot-product attention core on already-projected
/// q (`nq × dim`), k and v (`nk × dim`).
pub struct AttnCore {
    pub heads: usize,
    pub dim: usize,
}

pub struct AttnCoreCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head `nq × nk` probabilities.
    probs: Vec<Vec<f64>>,
    nq: usize,
    nk: usize,
}

impl AttnCore {
    fn split(&self, x: &[f64], n: usize, h: usize) -> Vec<f64> {
        let hd = self.dim / self.heads;
        let mut out = Vec::with_capacity(n * hd);
        for t in 0..n {
            out.extend_from_slice(&x[t * self.dim + h * hd..t * self.dim + (h + 1) * hd]);
        }
        out
    }

    pub fn forward(&self, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>, nq: usize, nk: usize) -> (Vec<f64>, AttnCoreCache) {
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; nq * self.dim];
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (self.split(&q, nq, h), self.split(&k, nk, h), self.split(&v, nk, h));
            let mut s = vec![0.0; nq * nk];
            matmul_a_bt(&qh, &kh, &mut s, nq, hd, nk, false);
            for row in s.chunks_exact_mut(nk) {
                let mut m = f64::NEG_INFINITY;
                for x in row.iter_mut() {
                    *x *= scale;
                    m = m.max(*x);
                }
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            let mut oh = vec![0.0; nq * hd];
            matmul(&s, &vh, &mut oh, nq, nk, hd, false);
            for t in 0..nq {
                out[t * self.dim + h * hd..t * self.dim + (h + 1) * hd].copy_from_slice(&oh[t * hd..(t + 1) * hd]);
            }
            probs.push(s);
        }
        (out, AttnCoreCache { q, k, v, probs, nq, nk })
    }

    /// Returns (dq, dk, dv).
    pub fn backward(&self, c: &AttnCoreCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (nq, nk) = (c.nq, c.nk);
        let mut dq = vec![0.0; nq * self.dim];
        let mut dk = vec![0.0; nk * self.dim];
        let mut dv = vec![0.0; nk * self.dim];
        for h in 0..self.heads {
            let (qh, kh, vh) = (self.split(&c.q, nq, h), self.split(&c.k, nk, h), self.split(&c.v, nk, h));
            let doh = self.split(dout, nq, h);
            let p = &c.probs[h];
            let mut dp = vec![0.0; nq * nk];
            matmul_a_bt(&doh, &vh, &mut dp, nq, hd, nk, false);
            let mut dvh = vec![0.0; nk * hd];
            matmul_at_b(p, &doh, &mut dvh, nk, nq, hd, false);
            let mut ds = vec![0.0; nq * nk];
            for i in 0..nq {
                let (pr, dpr) = (&p[i * nk..(i + 1) * nk], &dp[i * nk..(i + 1) * nk]);
                let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for j in 0..nk {
                    ds[i * nk + j] = pr[j] * (dpr[j] - dot) * scale;
                }
            }
            let mut dqh = vec![0.0; nq * hd];
            matmul(&ds, &kh, &mut dqh, nq, nk, hd, false);
            let mut dkh = vec![0.0; nk * hd];
            matmul_at_b(&ds, &qh, &mut dkh, nk, nq, hd, false);
            for t in 0..nq {
                dq[t * self.dim + h * hd..t * self.dim + (h + 1) * hd].copy_from_slice(&dqh[t * hd..(t + 1) * hd]);
            }
            for t in 0..nk {
                dk[t * self.dim + h * hd..t * self.dim + (h + 1) * hd].copy_from_slice(&dkh[t * hd..(t + 1) * hd]);
                dv[t * self.dim + h * hd..t * self.dim + (h + 1) * hd].copy_from_slice(&dvh[t * hd..(t + 1) * hd]);
            }
        }
        (dq, dk, dv)
    }
}

/// Self-attention with rotary encoding on queries and keys.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct SelfAttnCache {
    x: Vec<f64>,
    core: AttnCoreCache,
    attn_out: Vec<f64>,
}

impl SelfAttention {
    pub fn forward(&self, p: &ParamStore, x: &[f64], n: usize, rope: &AxialRope) -> (Vec<f64>, SelfAttnCache) {
        let d = self.dim;
        let qkv = self.qkv.forward(p, x, n);
        let mut q = Vec::with_capacity(n * d);
        let mut k = Vec::with_capacity(n * d);
        let mut v = Vec::with_capacity(n * d);
        for row in qkv.chunks_exact(3 * d) {
            q.extend_from_slice(&row[..d]);
            k.extend_from_slice(&row[d..2 * d]);
            v.extend_from_slice(&row[2 * d..]);
        }
        rope.apply(&mut q, d, false).expect("rope grid matches token count");
        rope.apply(&mut k, d, false).expect("rope grid matches token count");
        let core = AttnCore { heads: self.heads, dim: d };
        let (attn_out, cc) = core.forward(q, k, v, n, n);
        let y = self.proj.forward(p, &attn_out, n);
        (y, SelfAttnCache { x: x.to_vec(), core: cc, attn_out })
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        g: &mut Grads,
        c: &SelfAttnCache,
        dy: &[f64],
        n: usize,
        rope: &AxialRope,
    ) -> Vec<f64> {
        let d = self.dim;
        let dattn = self.proj.backward(p, g, &c.attn_out, dy, n);
        let core = AttnCore { heads: self.heads, dim: d };
        let (mut dq, mut dk, dv) = core.backward(&c.core, &dattn);
        rope.apply(&mut dq, d, true).expect("rope grid matches token count");
        rope.apply(&mut dk, d, true).expect("rope grid matches token count");
        let mut dqkv = Vec::with_capacity(n * 3 * d);
        for t in 0..n {
            dqkv.extend_from_slice(&dq[t * d..(t + 1) * d]);
            dqkv.extend_from_slice(&dk[t * d..(t + 1) * d]);
            dqkv.extend_from_slice(&dv[t * d..(t + 1) * d]);
        }
        self.qkv.backward(p, g, &c.x, &dqkv, n)
    }
}

/// Queries from one view attend to keys/values of the other view.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct CrossAttnCache {
    x: Vec<f64>,
    ctx: Vec<f64>,
    core: AttnCoreCache,
    attn_out: Vec<f64>,
}

impl CrossAttention {
    pub fn forward(&self, p: &ParamStore, x: &[f64], nq: usize, ctx: &[f64], nk: usize) -> (Vec<f64>, CrossAttnCache) {
        let d = self.dim;
        let q = self.q.forward(p, x, nq);
        let kv = self.kv.forward(p, ctx, nk);
        let mut k = Vec::with_capacity(nk * d);
        let mut v = Vec::with_capacity(nk * d);
        for row in kv.chunks_exact(2 * d) {
            k.extend_from_slice(&row[..d]);
            v.extend_from_slice(&row[d..]);
        }
        let core = AttnCore { heads: self.heads, dim: d };
        let (attn_out, cc) = core.forward(q, k, v, nq, nk);
        let y = self.proj.forward(p, &attn_out, nq);
        (y, CrossAttnCache { x: x.to_vec(), ctx: ctx.to_vec(), core: cc, attn_out })
    }

    /// Returns (dL/dx, dL/dctx).
    pub fn backward(&self, p: &ParamStore, g: &mut Grads, c: &CrossAttnCache, dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let (nq, nk) = (c.core.nq, c.core.nk);
        let dattn = self.proj.backward(p, g, &c.attn_out, dy, nq);
        let core = AttnCore { heads: self.heads, dim: d };
        let (dq, dk, dv) = core.backward(&c.core, &dattn);
        let dx = self.q.backward(p, g, &c.x, &dq, nq);
        let mut dkv = Vec::with_capacity(nk * 2 * d);
        for t in 0..nk {
            dkv.extend_from_slice(&dk[t * d..(t + 1) * d]);
            dkv.extend_from_slice(&dv[t * d..(t + 1) * d]);
        }
        let dctx = self.kv.backward(p, g, &c.ctx, &dkv, nk);
        (dx, dctx)
    }
}

pub fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
