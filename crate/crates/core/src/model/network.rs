use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Frame, Mask, NormalMap, Pointmap, Vec3};
use crate::prelude::*;
use crate::rope::AxialRope;
use crate::synth::Image;

use super::layers::{
    add_into, CrossAttention, CrossAttnCache, LayerNorm, Linear, LnCache, Mlp, MlpCache, SelfAttention, SelfAttnCache,
};
use super::{Grads, ModelConfig, ParamStore, Tensor};

/// Row-major `(rows · cols) × channels` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub tokens: Vec<f64>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.tokens[t * self.channels..(t + 1) * self.channels]
    }
}

/// Raw patches: token `(r, c)` holds the `patch_size²` pixels of its patch
/// (row-major, RGB interleaved) mapped from [0, 1] to [-1, 1].
pub fn patchify(image: &Image, patch_size: usize) -> Result<TokenGrid> {
    let ps = patch_size;
    if ps == 0 || image.width % ps != 0 || image.height % ps != 0 || image.width == 0 || image.height == 0 {
        return Err(Error::shape("image size (multiple of patch size)", ps, (image.height, image.width)));
    }
    let (rows, cols) = (image.height / ps, image.width / ps);
    let channels = ps * ps * 3;
    let mut tokens = Vec::with_capacity(rows * cols * channels);
    for r in 0..rows {
        for c in 0..cols {
            for py in 0..ps {
                let start = ((r * ps + py) * image.width + c * ps) * 3;
                tokens.extend(image.data[start..start + ps * 3].iter().map(|v| 2.0 * *v as f64 - 1.0));
            }
        }
    }
    Ok(TokenGrid { rows, cols, channels, tokens })
}

/// Per-pixel unit descriptors, row-major `height × width × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescriptorMap {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::shape("descriptor map", width * height * dim, data.len()));
        }
        Ok(DescriptorMap { width, height, dim, data })
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    /// Errors with the first pixel whose norm is off by more than `tol`.
    pub fn check_unit(&self, tol: f64) -> Result<()> {
        for (pixel, d) in self.data.chunks_exact(self.dim).enumerate() {
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= tol) {
                return Err(Error::NonUnitDescriptor { pixel, norm });
            }
        }
        Ok(())
    }
}

/// Dense predictions for one view at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    /// Points in the view's own frame.
    pub pointmap_local: Pointmap,
    /// The same pixels expressed in the other view's frame.
    pub pointmap_cross: Pointmap,
    pub normals: NormalMap,
    pub depth: DepthMap,
    pub descriptors: DescriptorMap,
}

impl HeadOutputs {
    pub fn width(&self) -> usize {
        self.pointmap_local.width
    }

    pub fn height(&self) -> usize {
        self.pointmap_local.height
    }

    /// Local points with their predicted normals appended per pixel.
    pub fn points_with_normals(&self) -> Vec<[f64; 6]> {
        self.pointmap_local
            .points
            .iter()
            .zip(&self.normals.normals)
            .map(|(p, n)| [p[0], p[1], p[2], n[0], n[1], n[2]])
            .collect()
    }
}

/// Upstream gradients for one view; `None` skips that head.
#[derive(Clone, Debug, Default)]
pub struct HeadGrads {
    pub pointmap_local: Option<Vec<Vec3>>,
    pub pointmap_cross: Option<Vec<Vec3>>,
    pub normals: Option<Vec<Vec3>>,
    pub descriptors: Option<Vec<f64>>,
    pub depth: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
struct EncBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
struct DecBlock {
    norm1: LayerNorm,
    self_attn: SelfAttention,
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    cross_attn: CrossAttention,
    norm3: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Copy, Debug)]
struct Heads {
    pointmap: Linear,
    normal: Linear,
    matching: Linear,
    depth: Linear,
}

const POINTMAP_CHANNELS: usize = 6;
const NORMAL_CHANNELS: usize = 3;
const DEPTH_CHANNELS: usize = 1;
const NORM_EPS: f64 = 1e-12;
const MAX_LOG_DEPTH: f64 = 30.0;

struct Builder {
    store: ParamStore,
}

impl Builder {
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let weight = self.store.push(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]));
        let bias = self.store.push(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { weight, bias, d_in, d_out }
    }

    fn norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        let weight = self.store.push(format!("{name}.weight"), Tensor::zeros(&[dim]));
        let bias = self.store.push(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { weight, bias, dim }
    }

    fn self_attn(&mut self, name: &str, dim: usize, heads: usize) -> SelfAttention {
        SelfAttention {
            qkv: self.linear(&format!("{name}.qkv"), dim, 3 * dim),
            proj: self.linear(&format!("{name}.proj"), dim, dim),
            heads,
            dim,
        }
    }

    fn mlp(&mut self, name: &str, dim: usize, ratio: usize) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{name}.fc1"), dim, ratio * dim),
            fc2: self.linear(&format!("{name}.fc2"), ratio * dim, dim),
        }
    }
}

/// Parameter layout and forward/backward passes for one [`ModelConfig`].
/// Holds parameter handles only; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    patch_embed: Linear,
    enc: Vec<EncBlock>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    dec: Vec<DecBlock>,
    dec_norm: LayerNorm,
    heads: Heads,
    template: ParamStore,
}

struct EncCache {
    ln1: LnCache,
    attn: SelfAttnCache,
    ln2: LnCache,
    mlp: MlpCache,
}

struct DecCache {
    ln1: LnCache,
    attn: SelfAttnCache,
    ln_q: LnCache,
    /// Normalization of the *other* view's block input.
    ln_kv: LnCache,
    cross: CrossAttnCache,
    ln3: LnCache,
    mlp: MlpCache,
}

struct ViewTrace {
    rows: usize,
    cols: usize,
    rope: AxialRope,
    patches: Vec<f64>,
    enc: Vec<EncCache>,
    enc_norm: LnCache,
    enc_out: Vec<f64>,
    dec: Vec<DecCache>,
    dec_norm: LnCache,
    dec_out: Vec<f64>,
    normal_raw: Vec<f64>,
    desc_raw: Vec<f64>,
    depth_raw: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass over a pair.
pub struct ForwardTrace {
    views: [ViewTrace; 2],
    outputs: [HeadOutputs; 2],
}

impl ForwardTrace {
    pub fn outputs(&self) -> &[HeadOutputs; 2] {
        &self.outputs
    }

    pub fn into_outputs(self) -> [HeadOutputs; 2] {
        self.outputs
    }
}

fn normalize_rows(raw: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for row in raw.chunks_exact(dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        out.extend(row.iter().map(|x| x / n));
    }
    out
}

fn normalize_rows_backward(raw: &[f64], dy: &[f64], dim: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(raw.len());
    for (row, g) in raw.chunks_exact(dim).zip(dy.chunks_exact(dim)) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        let dot: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (n * n);
        dx.extend(row.iter().zip(g).map(|(x, gi)| (gi - x * dot) / n));
    }
    dx
}

impl Network {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (e, d, h, m) = (cfg.embed_dim, cfg.decoder_dim, cfg.n_heads, cfg.mlp_ratio);
        let p2 = cfg.patch_size * cfg.patch_size;
        let mut b = Builder { store: ParamStore::new() };
        let patch_embed = b.linear("patch_embed", 3 * p2, e);
        let enc = (0..cfg.n_enc_blocks)
            .map(|i| EncBlock {
                norm1: b.norm(&format!("enc.{i}.norm1"), e),
                attn: b.self_attn(&format!("enc.{i}.attn"), e, h),
                norm2: b.norm(&format!("enc.{i}.norm2"), e),
                mlp: b.mlp(&format!("enc.{i}.mlp"), e, m),
            })
            .collect();
        let enc_norm = b.norm("enc_norm", e);
        let dec_embed = b.linear("dec_embed", e, d);
        let dec = (0..cfg.n_dec_blocks)
            .map(|i| DecBlock {
                norm1: b.norm(&format!("dec.{i}.norm1"), d),
                self_attn: b.self_attn(&format!("dec.{i}.self_attn"), d, h),
                norm_q: b.norm(&format!("dec.{i}.norm_q"), d),
                norm_kv: b.norm(&format!("dec.{i}.norm_kv"), d),
                cross_attn: CrossAttention {
                    q: b.linear(&format!("dec.{i}.cross_attn.q"), d, d),
                    kv: b.linear(&format!("dec.{i}.cross_attn.kv"), d, 2 * d),
                    proj: b.linear(&format!("dec.{i}.cross_attn.proj"), d, d),
                    heads: h,
                    dim: d,
                },
                norm3: b.norm(&format!("dec.{i}.norm3"), d),
                mlp: b.mlp(&format!("dec.{i}.mlp"), d, m),
            })
            .collect();
        let dec_norm = b.norm("dec_norm", d);
        let heads = Heads {
            pointmap: b.linear("head.pointmap", d, p2 * POINTMAP_CHANNELS),
            normal: b.linear("head.normal", d, p2 * NORMAL_CHANNELS),
            matching: b.linear("head.matching", d, p2 * cfg.descriptor_dim),
            depth: b.linear("head.depth", d, p2 * DEPTH_CHANNELS),
        };
        Ok(Network { cfg: *cfg, patch_embed, enc, enc_norm, dec_embed, dec, dec_norm, heads, template: b.store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// All parameter tensors of this architecture, zero-filled.
    pub fn empty_params(&self) -> ParamStore {
        self.template.clone()
    }

    fn check_params(&self, p: &ParamStore) -> Result<()> {
        if p.len() != self.template.len() {
            return Err(Error::shape("parameter tensor count", self.template.len(), p.len()));
        }
        for ((name, t), (_, r)) in p.iter().zip(self.template.iter()) {
            if t.shape != r.shape || t.data.len() != r.numel() {
                return Err(Error::TensorShape {
                    name: name.to_string(),
                    expected: format!("{:?}", r.shape),
                    got: format!("{:?}", t.shape),
                });
            }
        }
        Ok(())
    }

    /// Patch projection of `image` into `embed_dim` channels.
    pub fn embed(&self, p: &ParamStore, image: &Image) -> Result<TokenGrid> {
        let raw = patchify(image, self.cfg.patch_size)?;
        let n = raw.len();
        let mut tokens = self.patch_embed.forward(p, &raw.tokens, n);
        if self.cfg.coord_embedding {
            add_coord_embedding(&mut tokens, raw.rows, raw.cols, self.cfg.embed_dim);
        }
        Ok(TokenGrid { rows: raw.rows, cols: raw.cols, channels: self.cfg.embed_dim, tokens })
    }

    fn rope(&self, grid: &TokenGrid) -> Result<AxialRope> {
        AxialRope::new((grid.rows, grid.cols), &self.cfg.rope)
    }

    fn encode_traced(&self, p: &ParamStore, x: &TokenGrid, rope: &AxialRope) -> (Vec<f64>, Vec<EncCache>, LnCache) {
        let n = x.len();
        let mut h = x.tokens.clone();
        let mut caches = Vec::with_capacity(self.enc.len());
        for blk in &self.enc {
            let (a_in, ln1) = blk.norm1.forward(p, &h);
            let (a, attn) = blk.attn.forward(p, &a_in, n, rope);
            add_into(&mut h, &a);
            let (m_in, ln2) = blk.norm2.forward(p, &h);
            let (mo, mlp) = blk.mlp.forward(p, &m_in, n);
            add_into(&mut h, &mo);
            caches.push(EncCache { ln1, attn, ln2, mlp });
        }
        let (out, ln) = self.enc_norm.forward(p, &h);
        (out, caches, ln)
    }

    /// Encoder blocks and final norm; the same parameters serve every view.
    pub fn encode(&self, p: &ParamStore, x: &TokenGrid) -> Result<TokenGrid> {
        if x.channels != self.cfg.embed_dim || x.tokens.len() != x.len() * x.channels {
            return Err(Error::shape("encoder input channels", self.cfg.embed_dim, x.channels));
        }
        let rope = self.rope(x)?;
        let (tokens, _, _) = self.encode_traced(p, x, &rope);
        Ok(TokenGrid { tokens, ..x.clone() })
    }

    /// Runs every decoder block on both views at once. Inputs are
    /// `decoder_dim`-channel tokens (after `dec_embed`).
    fn decode_traced(
        &self,
        p: &ParamStore,
        x: [Vec<f64>; 2],
        n: [usize; 2],
        ropes: [&AxialRope; 2],
    ) -> ([Vec<f64>; 2], [Vec<DecCache>; 2]) {
        let [mut h0, mut h1] = x;
        let mut caches: [Vec<DecCache>; 2] = [Vec::new(), Vec::new()];
        for blk in &self.dec {
            let inputs = [h0, h1];
            let mut outs: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for v in 0..2 {
                let o = 1 - v;
                let mut h = inputs[v].clone();
                let (a_in, ln1) = blk.norm1.forward(p, &h);
                let (a, attn) = blk.self_attn.forward(p, &a_in, n[v], ropes[v]);
                add_into(&mut h, &a);
                let (q_in, ln_q) = blk.norm_q.forward(p, &h);
                let (ctx, ln_kv) = blk.norm_kv.forward(p, &inputs[o]);
                let (c, cross) = blk.cross_attn.forward(p, &q_in, n[v], &ctx, n[o]);
                add_into(&mut h, &c);
                let (m_in, ln3) = blk.norm3.forward(p, &h);
                let (mo, mlp) = blk.mlp.forward(p, &m_in, n[v]);
                add_into(&mut h, &mo);
                outs[v] = h;
                caches[v].push(DecCache { ln1, attn, ln_q, ln_kv, cross, ln3, mlp });
            }
            [h0, h1] = outs;
        }
        ([h0, h1], caches)
    }

    /// Decoder over a pair of encoder outputs; returns the normalized
    /// decoder tokens of each view. Grids may differ in size.
    pub fn decode_pair(&self, p: &ParamStore, feat1: &TokenGrid, feat2: &TokenGrid) -> Result<(TokenGrid, TokenGrid)> {
        for f in [feat1, feat2] {
            if f.channels != self.cfg.embed_dim || f.tokens.len() != f.len() * f.channels {
                return Err(Error::shape("decoder input channels", self.cfg.embed_dim, f.channels));
            }
        }
        let (r1, r2) = (self.rope(feat1)?, self.rope(feat2)?);
        let x1 = self.dec_embed.forward(p, &feat1.tokens, feat1.len());
        let x2 = self.dec_embed.forward(p, &feat2.tokens, feat2.len());
        let ([y1, y2], _) = self.decode_traced(p, [x1, x2], [feat1.len(), feat2.len()], [&r1, &r2]);
        let d = self.cfg.decoder_dim;
        let (y1, _) = self.dec_norm.forward(p, &y1);
        let (y2, _) = self.dec_norm.forward(p, &y2);
        Ok((
            TokenGrid { rows: feat1.rows, cols: feat1.cols, channels: d, tokens: y1 },
            TokenGrid { rows: feat2.rows, cols: feat2.cols, channels: d, tokens: y2 },
        ))
    }

    /// Token `(gr, gc)` channel `(py · ps + px) · C + c` goes to pixel
    /// `(gr · ps + py, gc · ps + px)` channel `c`.
    fn unshuffle(&self, tokens: &[f64], rows: usize, cols: usize, ch: usize) -> Vec<f64> {
        let ps = self.cfg.patch_size;
        let w = cols * ps;
        let mut out = vec![0.0; rows * cols * ps * ps * ch];
        let per = ps * ps * ch;
        for gr in 0..rows {
            for gc in 0..cols {
                let t = &tokens[(gr * cols + gc) * per..(gr * cols + gc + 1) * per];
                for py in 0..ps {
                    for px in 0..ps {
                        let dst = ((gr * ps + py) * w + gc * ps + px) * ch;
                        let src = (py * ps + px) * ch;
                        out[dst..dst + ch].copy_from_slice(&t[src..src + ch]);
                    }
                }
            }
        }
        out
    }

    fn shuffle(&self, pixels: &[f64], rows: usize, cols: usize, ch: usize) -> Vec<f64> {
        let ps = self.cfg.patch_size;
        let w = cols * ps;
        let per = ps * ps * ch;
        let mut out = vec![0.0; rows * cols * per];
        for gr in 0..rows {
            for gc in 0..cols {
                let base = (gr * cols + gc) * per;
                for py in 0..ps {
                    for px in 0..ps {
                        let src = ((gr * ps + py) * w + gc * ps + px) * ch;
                        let dst = base + (py * ps + px) * ch;
                        out[dst..dst + ch].copy_from_slice(&pixels[src..src + ch]);
                    }
                }
            }
        }
        out
    }

    fn head(&self, p: &ParamStore, lin: &Linear, tokens: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let ch = lin.d_out / (self.cfg.patch_size * self.cfg.patch_size);
        let t = lin.forward(p, tokens, rows * cols);
        self.unshuffle(&t, rows, cols, ch)
    }

    fn head_backward(
        &self,
        p: &ParamStore,
        g: &mut Grads,
        lin: &Linear,
        tokens: &[f64],
        rows: usize,
        cols: usize,
        dpix: &[f64],
        dtokens: &mut [f64],
    ) {
        let ch = lin.d_out / (self.cfg.patch_size * self.cfg.patch_size);
        let dt = self.shuffle(dpix, rows, cols, ch);
        let dx = lin.backward(p, g, tokens, &dt, rows * cols);
        add_into(dtokens, &dx);
    }

    fn outputs(
        &self,
        p: &ParamStore,
        view: usize,
        tr: &ViewTrace,
    ) -> Result<(HeadOutputs, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (rows, cols, ps) = (tr.rows, tr.cols, self.cfg.patch_size);
        let (w, h) = (cols * ps, rows * ps);
        let x = &tr.dec_out;
        let pm = self.head(p, &self.heads.pointmap, x, rows, cols);
        let normal_raw = self.head(p, &self.heads.normal, x, rows, cols);
        let desc_raw = self.head(p, &self.heads.matching, x, rows, cols);
        let depth_raw = self.head(p, &self.heads.depth, x, rows, cols);
        let mask = Mask::filled(w, h, true);
        let own = Frame::View(view as u32);
        let other = Frame::View(1 - view as u32);
        let local: Vec<Vec3> = pm.chunks_exact(6).map(|c| [c[0], c[1], c[2]]).collect();
        let cross: Vec<Vec3> = pm.chunks_exact(6).map(|c| [c[3], c[4], c[5]]).collect();
        let normals: Vec<Vec3> = normalize_rows(&normal_raw, 3).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let depth: Vec<f64> = depth_raw.iter().map(|z| z.min(MAX_LOG_DEPTH).exp()).collect();
        let desc = normalize_rows(&desc_raw, self.cfg.descriptor_dim);
        let out = HeadOutputs {
            pointmap_local: Pointmap::new(w, h, local, own, mask.clone())?,
            pointmap_cross: Pointmap::new(w, h, cross, other, mask.clone())?,
            normals: NormalMap::new(w, h, normals, own, mask.clone())?,
            depth: DepthMap::new(w, h, depth, mask)?,
            descriptors: DescriptorMap::new(w, h, self.cfg.descriptor_dim, desc)?,
        };
        Ok((out, normal_raw, desc_raw, depth_raw))
    }

    /// Full pipeline with the intermediate state kept for [`Network::backward`].
    pub fn forward_traced(&self, p: &ParamStore, images: [&Image; 2]) -> Result<ForwardTrace> {
        self.check_params(p)?;
        let mut pre = Vec::with_capacity(2);
        for img in images {
            let raw = patchify(img, self.cfg.patch_size)?;
            let rope = self.rope(&raw)?;
            let mut tk = self.patch_embed.forward(p, &raw.tokens, raw.len());
            if self.cfg.coord_embedding {
                add_coord_embedding(&mut tk, raw.rows, raw.cols, self.cfg.embed_dim);
            }
            let embedded = TokenGrid { tokens: tk, channels: self.cfg.embed_dim, ..raw.clone() };
            let (enc_out, enc, enc_norm) = self.encode_traced(p, &embedded, &rope);
            let dec_in = self.dec_embed.forward(p, &enc_out, raw.len());
            pre.push((raw, rope, enc_out, enc, enc_norm, dec_in));
        }
        let (r1, rope1, eo1, ec1, en1, d1) = pre.pop().expect("two views");
        let (r0, rope0, eo0, ec0, en0, d0) = pre.pop().expect("two views");
        let ([y0, y1], [dc0, dc1]) = self.decode_traced(p, [d0, d1], [r0.len(), r1.len()], [&rope0, &rope1]);
        let mut traces = Vec::with_capacity(2);
        for (raw, rope, enc_out, enc, enc_norm, y, dec) in
            [(r0, rope0, eo0, ec0, en0, y0, dc0), (r1, rope1, eo1, ec1, en1, y1, dc1)]
        {
            let (dec_out, dec_norm) = self.dec_norm.forward(p, &y);
            traces.push(ViewTrace {
                rows: raw.rows,
                cols: raw.cols,
                rope,
                patches: raw.tokens,
                enc,
                enc_norm,
                enc_out,
                dec,
                dec_norm,
                dec_out,
                normal_raw: Vec::new(),
                desc_raw: Vec::new(),
                depth_raw: Vec::new(),
            });
        }
        let mut outs = Vec::with_capacity(2);
        for (v, tr) in traces.iter_mut().enumerate() {
            let (o, nr, dr, zr) = self.outputs(p, v, tr)?;
            tr.normal_raw = nr;
            tr.desc_raw = dr;
            tr.depth_raw = zr;
            outs.push(o);
        }
        let o1 = outs.pop().expect("two views");
        let o0 = outs.pop().expect("two views");
        let t1 = traces.pop().expect("two views");
        let t0 = traces.pop().expect("two views");
        Ok(ForwardTrace { views: [t0, t1], outputs: [o0, o1] })
    }

    /// Accumulates parameter gradients into `g`. With `through_backbone`
    /// false only the head parameters receive gradients.
    pub fn backward(
        &self,
        p: &ParamStore,
        g: &mut Grads,
        trace: &ForwardTrace,
        head_grads: &[HeadGrads; 2],
        through_backbone: bool,
    ) -> Result<()> {
        let d = self.cfg.decoder_dim;
        let mut d_dec_in: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for v in 0..2 {
            let tr = &trace.views[v];
            let hg = &head_grads[v];
            let (rows, cols) = (tr.rows, tr.cols);
            let npix = rows * cols * self.cfg.patch_size * self.cfg.patch_size;
            let mut dx = vec![0.0; rows * cols * d];
            if hg.pointmap_local.is_some() || hg.pointmap_cross.is_some() {
                let mut dpm = vec![0.0; npix * 6];
                for (slot, off) in [(&hg.pointmap_local, 0), (&hg.pointmap_cross, 3)] {
                    if let Some(gp) = slot {
                        check_len("pointmap gradient", npix, gp.len())?;
                        for (i, gi) in gp.iter().enumerate() {
                            dpm[i * 6 + off..i * 6 + off + 3].copy_from_slice(gi);
                        }
                    }
                }
                self.head_backward(p, g, &self.heads.pointmap, &tr.dec_out, rows, cols, &dpm, &mut dx);
            }
            if let Some(gn) = &hg.normals {
                check_len("normal gradient", npix, gn.len())?;
                let flat: Vec<f64> = gn.iter().flatten().copied().collect();
                let draw = normalize_rows_backward(&tr.normal_raw, &flat, 3);
                self.head_backward(p, g, &self.heads.normal, &tr.dec_out, rows, cols, &draw, &mut dx);
            }
            if let Some(gd) = &hg.descriptors {
                check_len("descriptor gradient", npix * self.cfg.descriptor_dim, gd.len())?;
                let draw = normalize_rows_backward(&tr.desc_raw, gd, self.cfg.descriptor_dim);
                self.head_backward(p, g, &self.heads.matching, &tr.dec_out, rows, cols, &draw, &mut dx);
            }
            if let Some(gz) = &hg.depth {
                check_len("depth gradient", npix, gz.len())?;
                let draw: Vec<f64> = tr
                    .depth_raw
                    .iter()
                    .zip(gz)
                    .map(|(z, gi)| if *z < MAX_LOG_DEPTH { gi * z.exp() } else { 0.0 })
                    .collect();
                self.head_backward(p, g, &self.heads.depth, &tr.dec_out, rows, cols, &draw, &mut dx);
            }
            if through_backbone {
                d_dec_in[v] = self.dec_norm.backward(p, g, &tr.dec_norm, &dx);
            }
        }
        if !through_backbone {
            return Ok(());
        }
        let n = [trace.views[0].rows * trace.views[0].cols, trace.views[1].rows * trace.views[1].cols];
        for (bi, blk) in self.dec.iter().enumerate().rev() {
            let mut d_in: [Vec<f64>; 2] = [vec![0.0; n[0] * d], vec![0.0; n[1] * d]];
            for v in 0..2 {
                let o = 1 - v;
                let c = &trace.views[v].dec[bi];
                let dout = &d_dec_in[v];
                let mut db = dout.clone();
                let dm = blk.mlp.backward(p, g, &c.mlp, dout, n[v]);
                add_into(&mut db, &blk.norm3.backward(p, g, &c.ln3, &dm));
                let (dq, dctx) = blk.cross_attn.backward(p, g, &c.cross, &db);
                let mut da = db;
                add_into(&mut da, &blk.norm_q.backward(p, g, &c.ln_q, &dq));
                let dother = blk.norm_kv.backward(p, g, &c.ln_kv, &dctx);
                add_into(&mut d_in[o], &dother);
                let ds = blk.self_attn.backward(p, g, &c.attn, &da, n[v], &trace.views[v].rope);
                add_into(&mut d_in[v], &da);
                add_into(&mut d_in[v], &blk.norm1.backward(p, g, &c.ln1, &ds));
            }
            d_dec_in = d_in;
        }
        for v in 0..2 {
            let tr = &trace.views[v];
            let nv = n[v];
            let mut dh = self.dec_embed.backward(p, g, &tr.enc_out, &d_dec_in[v], nv);
            dh = self.enc_norm.backward(p, g, &tr.enc_norm, &dh);
            for (blk, c) in self.enc.iter().zip(&tr.enc).rev() {
                let dm = blk.mlp.backward(p, g, &c.mlp, &dh, nv);
                add_into(&mut dh, &blk.norm2.backward(p, g, &c.ln2, &dm));
                let da = blk.attn.backward(p, g, &c.attn, &dh, nv, &tr.rope);
                add_into(&mut dh, &blk.norm1.backward(p, g, &c.ln1, &da));
            }
            self.patch_embed.backward_params(g, &tr.patches, &dh, nv);
        }
        Ok(())
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(what, expected, got));
    }
    Ok(())
}

pub fn forward_pair(net: &Network, params: &ParamStore, images: [&Image; 2]) -> Result<[HeadOutputs; 2]> {
    Ok(net.forward_traced(params, images)?.into_outputs())
}

pub fn forward_pair_traced(net: &Network, params: &ParamStore, images: [&Image; 2]) -> Result<ForwardTrace> {
    net.forward_traced(params, images)
}

/// Adds `0.5·(sin, cos)(f·y)` and `0.5·(sin, cos)(f·x)` with `f = π(j+1)/2`
/// to channels `4j..4j+4`, where `(y, x)` are patch centres in `(0, 1)`.
fn add_coord_embedding(tokens: &mut [f64], rows: usize, cols: usize, e: usize) {
    for r in 0..rows {
        let y = (r as f64 + 0.5) / rows as f64;
        for c in 0..cols {
            let x = (c as f64 + 0.5) / cols as f64;
            let t = &mut tokens[(r * cols + c) * e..(r * cols + c + 1) * e];
            for j in 0..e / 4 {
                let f = core::f64::consts::FRAC_PI_2 * (j + 1) as f64;
                t[4 * j] += 0.5 * (f * y).sin();
                t[4 * j + 1] += 0.5 * (f * y).cos();
                t[4 * j + 2] += 0.5 * (f * x).sin();
                t[4 * j + 3] += 0.5 * (f * x).cos();
            }
        }
    }
}
