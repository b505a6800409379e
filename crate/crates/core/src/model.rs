//! A miniature decoder-only causal transformer.
//!
//! Architecture: RMS pre-normalization, rotary position encoding, causal
//! multi-head attention, gated (SiLU) MLP, tied input/output embeddings.
//! Forward and backward passes are written out explicitly over flat
//! buffers; there is no autograd graph. Training runs in `f32`, gradient
//! checks instantiate the same code at `f64`.

use crate::math::{log_sum_exp, mm_ab, mm_abt, mm_atb, softmax_inplace, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("context error: sequence of {len} exceeds max context {max}")]
    Context { len: usize, max: usize },
    #[error("vocab error: token id {id} out of range for vocab {vocab}")]
    Vocab { id: u32, vocab: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub max_context: usize,
    pub rotary_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale default: pre-trains on a laptop CPU in minutes.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 408,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            head_dim: 32,
            mlp_hidden: 320,
            max_context: 512,
            rotary_base: 10_000.0,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.d_model != self.n_heads * self.head_dim {
            return Err(LmError::Config(format!(
                "dModel {} must equal nHeads {} * headDim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(LmError::Config("headDim must be even for rotary pairs".into()));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_context == 0 {
            return Err(LmError::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }

    /// A deliberately tiny configuration for finite-difference checks.
    pub fn tiny(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            head_dim: 4,
            mlp_hidden: 12,
            max_context: 16,
            rotary_base: 10_000.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub rms1: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub rms2: Vec<T>,
    pub w_gate: Vec<T>,
    pub w_up: Vec<T>,
    pub w_down: Vec<T>,
}

/// All weights of the model, addressable by name via [`Parameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    pub wte: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
}

impl<T: Scalar> Parameters<T> {
    /// Deterministic seeded initialization.
    pub fn init(config: &ModelConfig) -> Result<Self, LmError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let base = Normal::new(0.0f64, 0.02).expect("valid std");
        // Residual-path projections are scaled down with depth.
        let resid = Normal::new(0.0f64, 0.02 / (2.0 * config.n_layers as f64).sqrt())
            .expect("valid std");
        let mut draw = |n: usize, dist: &Normal<f64>| -> Vec<T> {
            (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
        };
        let d = config.d_model;
        let h = config.mlp_hidden;
        let wte = draw(config.vocab_size * d, &base);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                rms1: vec![T::one(); d],
                wq: draw(d * d, &base),
                wk: draw(d * d, &base),
                wv: draw(d * d, &base),
                wo: draw(d * d, &resid),
                rms2: vec![T::one(); d],
                w_gate: draw(d * h, &base),
                w_up: draw(d * h, &base),
                w_down: draw(h * d, &resid),
            });
        }
        let final_norm = vec![T::one(); d];
        Ok(Parameters { config: config.clone(), wte, layers, final_norm })
    }

    pub fn zeros_like(&self) -> Self {
        let zero = |v: &Vec<T>| vec![T::zero(); v.len()];
        Parameters {
            config: self.config.clone(),
            wte: zero(&self.wte),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    rms1: zero(&l.rms1),
                    wq: zero(&l.wq),
                    wk: zero(&l.wk),
                    wv: zero(&l.wv),
                    wo: zero(&l.wo),
                    rms2: zero(&l.rms2),
                    w_gate: zero(&l.w_gate),
                    w_up: zero(&l.w_up),
                    w_down: zero(&l.w_down),
                })
                .collect(),
            final_norm: zero(&self.final_norm),
        }
    }

    pub fn scale_all(&mut self, factor: T) {
        self.for_each_tensor_mut(|_, t| {
            for v in t {
                *v *= factor;
            }
        });
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    /// Visits every tensor in a stable order with its name.
    pub fn for_each_tensor<'a>(&'a self, mut f: impl FnMut(String, &'a [T])) {
        f("wte".into(), &self.wte);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layers.{i}.rms1"), &l.rms1);
            f(format!("layers.{i}.wq"), &l.wq);
            f(format!("layers.{i}.wk"), &l.wk);
            f(format!("layers.{i}.wv"), &l.wv);
            f(format!("layers.{i}.wo"), &l.wo);
            f(format!("layers.{i}.rms2"), &l.rms2);
            f(format!("layers.{i}.w_gate"), &l.w_gate);
            f(format!("layers.{i}.w_up"), &l.w_up);
            f(format!("layers.{i}.w_down"), &l.w_down);
        }
        f("final_norm".into(), &self.final_norm);
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut [T])) {
        f("wte", &mut self.wte);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.rms1"), &mut l.rms1);
            f(&format!("layers.{i}.wq"), &mut l.wq);
            f(&format!("layers.{i}.wk"), &mut l.wk);
            f(&format!("layers.{i}.wv"), &mut l.wv);
            f(&format!("layers.{i}.wo"), &mut l.wo);
            f(&format!("layers.{i}.rms2"), &mut l.rms2);
            f(&format!("layers.{i}.w_gate"), &mut l.w_gate);
            f(&format!("layers.{i}.w_up"), &mut l.w_up);
            f(&format!("layers.{i}.w_down"), &mut l.w_down);
        }
        f("final_norm", &mut self.final_norm);
    }

    pub fn to_f64(&self) -> Parameters<f64> {
        Parameters {
            config: self.config.clone(),
            wte: self.wte.iter().map(|v| v.as_f64()).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    rms1: l.rms1.iter().map(|v| v.as_f64()).collect(),
                    wq: l.wq.iter().map(|v| v.as_f64()).collect(),
                    wk: l.wk.iter().map(|v| v.as_f64()).collect(),
                    wv: l.wv.iter().map(|v| v.as_f64()).collect(),
                    wo: l.wo.iter().map(|v| v.as_f64()).collect(),
                    rms2: l.rms2.iter().map(|v| v.as_f64()).collect(),
                    w_gate: l.w_gate.iter().map(|v| v.as_f64()).collect(),
                    w_up: l.w_up.iter().map(|v| v.as_f64()).collect(),
                    w_down: l.w_down.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
            final_norm: self.final_norm.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// Pre-softmax next-token scores, one row per input position.
#[derive(Debug, Clone)]
pub struct Logits<T> {
    pub data: Vec<T>,
    pub rows: usize,
    pub vocab: usize,
}

impl<T: Scalar> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn softmax_row(&self, i: usize) -> Vec<T> {
        let mut row = self.row(i).to_vec();
        softmax_inplace(&mut row);
        row
    }
}

struct LayerCache<T> {
    x_in: Vec<T>,    // [R, D] residual stream entering the layer
    xh1: Vec<T>,     // [R, D] after rms1
    rstd1: Vec<T>,   // [R]
    qh: Vec<T>,      // [B*H, S*hd] head-major, post-rope
    kh: Vec<T>,      // [B*H, S*hd]
    vh: Vec<T>,      // [B*H, S*hd]
    att: Vec<T>,     // [B*H, S*S] softmaxed scores
    atty: Vec<T>,    // [R, D] attention output before wo
    x_mid: Vec<T>,   // [R, D] after attention residual
    xh2: Vec<T>,     // [R, D] after rms2
    rstd2: Vec<T>,   // [R]
    gate: Vec<T>,    // [R, H] pre-activation
    up: Vec<T>,      // [R, H]
    act: Vec<T>,     // [R, H] silu(gate) * up
}

/// Activations kept by the forward pass for the backward pass.
pub struct ForwardCache<T> {
    pub batch: usize,
    pub seq: usize,
    layers: Vec<LayerCache<T>>,
    x_last: Vec<T>,
    xf: Vec<T>,
    rstdf: Vec<T>,
    pub logits: Logits<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Final normed hidden states, one row per position.
    pub fn final_hidden(&self) -> &[T] {
        &self.xf
    }
}

fn rms_forward<T: Scalar>(out: &mut [T], rstd: &mut [T], x: &[T], w: &[T], d: usize) {
    let eps = T::from_f64(RMS_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    out.par_chunks_mut(d).zip(rstd.par_iter_mut()).enumerate().for_each(|(r, (o, rs))| {
        let row = &x[r * d..(r + 1) * d];
        let ms: T = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let rstd_r = T::one() / (ms + eps).sqrt();
        *rs = rstd_r;
        for ((oi, &xi), &wi) in o.iter_mut().zip(row).zip(w) {
            *oi = xi * wi * rstd_r;
        }
    });
}

/// dx += backward of rms through `dy`; dw accumulated sequentially.
fn rms_backward<T: Scalar>(
    dx: &mut [T],
    dw: &mut [T],
    dy: &[T],
    x: &[T],
    w: &[T],
    rstd: &[T],
    d: usize,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    dx.par_chunks_mut(d).enumerate().for_each(|(r, dxr)| {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let rs = rstd[r];
        let s: T = dyr.iter().zip(xr).zip(w).map(|((&g, &xi), &wi)| g * wi * xi).sum();
        let coeff = rs * rs * rs * s * inv_d;
        for ((dxi, (&g, &xi)), &wi) in dxr.iter_mut().zip(dyr.iter().zip(xr)).zip(w) {
            *dxi += rs * g * wi - coeff * xi;
        }
    });
    let rows = x.len() / d;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let rs = rstd[r];
        for ((dwi, &g), &xi) in dw.iter_mut().zip(dyr).zip(xr) {
            *dwi += g * xi * rs;
        }
    }
}

/// Copies [R, D] row-major into per-(batch, head) chunks of [S, hd].
fn to_heads<T: Scalar>(out: &mut [T], x: &[T], b: usize, s: usize, heads: usize, hd: usize) {
    let d = heads * hd;
    debug_assert_eq!(out.len(), b * heads * s * hd);
    out.par_chunks_mut(s * hd).enumerate().for_each(|(bh, chunk)| {
        let bi = bh / heads;
        let h = bh % heads;
        for pos in 0..s {
            let src = &x[(bi * s + pos) * d + h * hd..][..hd];
            chunk[pos * hd..(pos + 1) * hd].copy_from_slice(src);
        }
    });
}

fn from_heads<T: Scalar>(out: &mut [T], xh: &[T], b: usize, s: usize, heads: usize, hd: usize) {
    let d = heads * hd;
    debug_assert_eq!(xh.len(), b * heads * s * hd);
    out.par_chunks_mut(d).enumerate().for_each(|(row, orow)| {
        let bi = row / s;
        let pos = row % s;
        for h in 0..heads {
            let src = &xh[(bi * heads + h) * s * hd + pos * hd..][..hd];
            orow[h * hd..(h + 1) * hd].copy_from_slice(src);
        }
    });
}

/// Rotates adjacent pairs of each head vector by position-dependent angles.
/// `sign` is +1 for forward, -1 for gradient rotation.
fn rope_heads<T: Scalar>(xh: &mut [T], s: usize, hd: usize, base: f64, sign: f64) {
    xh.par_chunks_mut(s * hd).for_each(|chunk| {
        for pos in 0..s {
            let row = &mut chunk[pos * hd..(pos + 1) * hd];
            for i in 0..hd / 2 {
                let freq = base.powf(-2.0 * i as f64 / hd as f64);
                let angle = sign * pos as f64 * freq;
                let (sin, cos) = angle.sin_cos();
                let (sin, cos) = (T::from_f64(sin), T::from_f64(cos));
                let a = row[2 * i];
                let b = row[2 * i + 1];
                row[2 * i] = a * cos - b * sin;
                row[2 * i + 1] = a * sin + b * cos;
            }
        }
    });
}

/// Runs the model over a flat batch of `b` sequences of length `s`.
pub fn forward_batch<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
    b: usize,
    s: usize,
) -> Result<ForwardCache<T>, LmError> {
    let cfg = &params.config;
    if tokens.len() != b * s {
        return Err(LmError::Shape(format!(
            "expected {b}*{s} tokens, got {}",
            tokens.len()
        )));
    }
    if s > cfg.max_context {
        return Err(LmError::Context { len: s, max: cfg.max_context });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(LmError::Vocab { id, vocab: cfg.vocab_size });
    }
    let d = cfg.d_model;
    let h = cfg.mlp_hidden;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim;
    let r = b * s;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let mut x = vec![T::zero(); r * d];
    for (row, &tok) in tokens.iter().enumerate() {
        x[row * d..(row + 1) * d]
            .copy_from_slice(&params.wte[tok as usize * d..(tok as usize + 1) * d]);
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let x_in = x.clone();
        let mut xh1 = vec![T::zero(); r * d];
        let mut rstd1 = vec![T::zero(); r];
        rms_forward(&mut xh1, &mut rstd1, &x_in, &lp.rms1, d);

        let mut q = vec![T::zero(); r * d];
        let mut k = vec![T::zero(); r * d];
        let mut v = vec![T::zero(); r * d];
        mm_ab(&mut q, &xh1, &lp.wq, r, d, d, false);
        mm_ab(&mut k, &xh1, &lp.wk, r, d, d, false);
        mm_ab(&mut v, &xh1, &lp.wv, r, d, d, false);

        let mut qh = vec![T::zero(); b * heads * s * hd];
        let mut kh = vec![T::zero(); b * heads * s * hd];
        let mut vh = vec![T::zero(); b * heads * s * hd];
        to_heads(&mut qh, &q, b, s, heads, hd);
        to_heads(&mut kh, &k, b, s, heads, hd);
        to_heads(&mut vh, &v, b, s, heads, hd);
        rope_heads(&mut qh, s, hd, cfg.rotary_base, 1.0);
        rope_heads(&mut kh, s, hd, cfg.rotary_base, 1.0);

        let mut att = vec![T::zero(); b * heads * s * s];
        let mut attyh = vec![T::zero(); b * heads * s * hd];
        att.par_chunks_mut(s * s)
            .zip(attyh.par_chunks_mut(s * hd))
            .enumerate()
            .for_each(|(bh, (att_c, y_c))| {
                let q_c = &qh[bh * s * hd..(bh + 1) * s * hd];
                let k_c = &kh[bh * s * hd..(bh + 1) * s * hd];
                let v_c = &vh[bh * s * hd..(bh + 1) * s * hd];
                for i in 0..s {
                    let qi = &q_c[i * hd..(i + 1) * hd];
                    let arow = &mut att_c[i * s..i * s + i + 1];
                    for (j, aij) in arow.iter_mut().enumerate() {
                        let kj = &k_c[j * hd..(j + 1) * hd];
                        let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                        *aij = dot * scale;
                    }
                    softmax_inplace(arow);
                    let yrow = &mut y_c[i * hd..(i + 1) * hd];
                    for (j, &aij) in arow.iter().enumerate() {
                        let vj = &v_c[j * hd..(j + 1) * hd];
                        for (yi, &vji) in yrow.iter_mut().zip(vj) {
                            *yi += aij * vji;
                        }
                    }
                }
            });

        let mut atty = vec![T::zero(); r * d];
        from_heads(&mut atty, &attyh, b, s, heads, hd);
        let mut x_mid = x_in.clone();
        mm_ab(&mut x_mid, &atty, &lp.wo, r, d, d, true);

        let mut xh2 = vec![T::zero(); r * d];
        let mut rstd2 = vec![T::zero(); r];
        rms_forward(&mut xh2, &mut rstd2, &x_mid, &lp.rms2, d);

        let mut gate = vec![T::zero(); r * h];
        let mut up = vec![T::zero(); r * h];
        mm_ab(&mut gate, &xh2, &lp.w_gate, r, d, h, false);
        mm_ab(&mut up, &xh2, &lp.w_up, r, d, h, false);
        let mut act = vec![T::zero(); r * h];
        act.par_chunks_mut(h).enumerate().for_each(|(row, arow)| {
            let g = &gate[row * h..(row + 1) * h];
            let u = &up[row * h..(row + 1) * h];
            for ((ai, &gi), &ui) in arow.iter_mut().zip(g).zip(u) {
                let sig = T::one() / (T::one() + (-gi).exp());
                *ai = gi * sig * ui;
            }
        });
        let mut x_out = x_mid.clone();
        mm_ab(&mut x_out, &act, &lp.w_down, r, h, d, true);

        layers.push(LayerCache {
            x_in,
            xh1,
            rstd1,
            qh,
            kh,
            vh,
            att,
            atty,
            x_mid,
            xh2,
            rstd2,
            gate,
            up,
            act,
        });
        x = x_out;
    }

    let x_last = x;
    let mut xf = vec![T::zero(); r * d];
    let mut rstdf = vec![T::zero(); r];
    rms_forward(&mut xf, &mut rstdf, &x_last, &params.final_norm, d);

    let mut logits = vec![T::zero(); r * cfg.vocab_size];
    mm_abt(&mut logits, &xf, &params.wte, r, d, cfg.vocab_size, false);

    Ok(ForwardCache {
        batch: b,
        seq: s,
        layers,
        x_last,
        xf,
        rstdf,
        logits: Logits { data: logits, rows: r, vocab: cfg.vocab_size },
    })
}

/// Accumulates parameter gradients for the batch. `dlogits` is the loss
/// gradient at the logits (may be `None` when only `extra_d_final`
/// injects gradient, e.g. for embedding-pooling losses).
pub fn backward_batch<T: Scalar>(
    params: &Parameters<T>,
    cache: &ForwardCache<T>,
    tokens: &[u32],
    dlogits: Option<&[T]>,
    extra_d_final: Option<&[T]>,
    grads: &mut Parameters<T>,
) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let h = cfg.mlp_hidden;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim;
    let b = cache.batch;
    let s = cache.seq;
    let r = b * s;
    let v = cfg.vocab_size;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    // Head (tied embeddings): logits = xf * wte^T.
    let mut dxf = vec![T::zero(); r * d];
    if let Some(dl) = dlogits {
        debug_assert_eq!(dl.len(), r * v);
        mm_ab(&mut dxf, dl, &params.wte, r, v, d, false);
        mm_atb(&mut grads.wte, dl, &cache.xf, r, v, d, true);
    }
    if let Some(extra) = extra_d_final {
        debug_assert_eq!(extra.len(), r * d);
        for (dst, &src) in dxf.iter_mut().zip(extra) {
            *dst += src;
        }
    }

    let mut dx = vec![T::zero(); r * d];
    rms_backward(
        &mut dx,
        &mut grads.final_norm,
        &dxf,
        &cache.x_last,
        &params.final_norm,
        &cache.rstdf,
        d,
    );

    for (li, lp) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let gl = &mut grads.layers[li];

        // MLP block: x_out = x_mid + act * w_down.
        let dmlp_out = dx; // gradient at x_out
        let mut dact = vec![T::zero(); r * h];
        mm_abt(&mut dact, &dmlp_out, &lp.w_down, r, d, h, false);
        mm_atb(&mut gl.w_down, &lc.act, &dmlp_out, r, h, d, true);

        let mut dgate = vec![T::zero(); r * h];
        let mut dup = vec![T::zero(); r * h];
        dgate
            .par_chunks_mut(h)
            .zip(dup.par_chunks_mut(h))
            .enumerate()
            .for_each(|(row, (dg, du))| {
                let g = &lc.gate[row * h..(row + 1) * h];
                let u = &lc.up[row * h..(row + 1) * h];
                let da = &dact[row * h..(row + 1) * h];
                for i in 0..h {
                    let sig = T::one() / (T::one() + (-g[i]).exp());
                    let silu = g[i] * sig;
                    let dsilu = sig * (T::one() + g[i] * (T::one() - sig));
                    dg[i] = da[i] * u[i] * dsilu;
                    du[i] = da[i] * silu;
                }
            });

        let mut dxh2 = vec![T::zero(); r * d];
        mm_abt(&mut dxh2, &dgate, &lp.w_gate, r, h, d, false);
        mm_abt(&mut dxh2, &dup, &lp.w_up, r, h, d, true);
        mm_atb(&mut gl.w_gate, &lc.xh2, &dgate, r, d, h, true);
        mm_atb(&mut gl.w_up, &lc.xh2, &dup, r, d, h, true);

        // x_mid receives the residual path plus the rms2 backward.
        let mut dx_mid = dmlp_out;
        rms_backward(&mut dx_mid, &mut gl.rms2, &dxh2, &lc.x_mid, &lp.rms2, &lc.rstd2, d);

        // Attention block: x_mid = x_in + atty * wo.
        let mut datty = vec![T::zero(); r * d];
        mm_abt(&mut datty, &dx_mid, &lp.wo, r, d, d, false);
        mm_atb(&mut gl.wo, &lc.atty, &dx_mid, r, d, d, true);

        let mut dattyh = vec![T::zero(); b * heads * s * hd];
        to_heads(&mut dattyh, &datty, b, s, heads, hd);

        let mut dqh = vec![T::zero(); b * heads * s * hd];
        let mut dkh = vec![T::zero(); b * heads * s * hd];
        let mut dvh = vec![T::zero(); b * heads * s * hd];
        dqh.par_chunks_mut(s * hd)
            .zip(dkh.par_chunks_mut(s * hd))
            .zip(dvh.par_chunks_mut(s * hd))
            .enumerate()
            .for_each(|(bh, ((dq_c, dk_c), dv_c))| {
                let q_c = &cache.layers[li].qh[bh * s * hd..(bh + 1) * s * hd];
                let k_c = &cache.layers[li].kh[bh * s * hd..(bh + 1) * s * hd];
                let v_c = &cache.layers[li].vh[bh * s * hd..(bh + 1) * s * hd];
                let att_c = &cache.layers[li].att[bh * s * s..(bh + 1) * s * s];
                let dy_c = &dattyh[bh * s * hd..(bh + 1) * s * hd];
                let mut datt = vec![T::zero(); s];
                for i in 0..s {
                    let dyi = &dy_c[i * hd..(i + 1) * hd];
                    let arow = &att_c[i * s..i * s + i + 1];
                    // dv and datt.
                    for (j, &aij) in arow.iter().enumerate() {
                        let vj = &v_c[j * hd..(j + 1) * hd];
                        let dvj = &mut dv_c[j * hd..(j + 1) * hd];
                        let mut dot = T::zero();
                        for ((dv_e, &v_e), &dy_e) in dvj.iter_mut().zip(vj).zip(dyi) {
                            *dv_e += aij * dy_e;
                            dot += v_e * dy_e;
                        }
                        datt[j] = dot;
                    }
                    // Softmax backward within the causal prefix.
                    let inner: T = arow.iter().zip(&datt).map(|(&a, &g)| a * g).sum();
                    let qi = &q_c[i * hd..(i + 1) * hd];
                    let dqi = &mut dq_c[i * hd..(i + 1) * hd];
                    for (j, &aij) in arow.iter().enumerate() {
                        let dscore = aij * (datt[j] - inner) * scale;
                        let kj = &k_c[j * hd..(j + 1) * hd];
                        let dkj = &mut dk_c[j * hd..(j + 1) * hd];
                        for e in 0..hd {
                            dqi[e] += dscore * kj[e];
                            dkj[e] += dscore * qi[e];
                        }
                    }
                }
            });

        rope_heads(&mut dqh, s, hd, cfg.rotary_base, -1.0);
        rope_heads(&mut dkh, s, hd, cfg.rotary_base, -1.0);

        let mut dq = vec![T::zero(); r * d];
        let mut dk = vec![T::zero(); r * d];
        let mut dv = vec![T::zero(); r * d];
        from_heads(&mut dq, &dqh, b, s, heads, hd);
        from_heads(&mut dk, &dkh, b, s, heads, hd);
        from_heads(&mut dv, &dvh, b, s, heads, hd);

        let mut dxh1 = vec![T::zero(); r * d];
        mm_abt(&mut dxh1, &dq, &lp.wq, r, d, d, false);
        mm_abt(&mut dxh1, &dk, &lp.wk, r, d, d, true);
        mm_abt(&mut dxh1, &dv, &lp.wv, r, d, d, true);
        mm_atb(&mut gl.wq, &lc.xh1, &dq, r, d, d, true);
        mm_atb(&mut gl.wk, &lc.xh1, &dk, r, d, d, true);
        mm_atb(&mut gl.wv, &lc.xh1, &dv, r, d, d, true);

        let mut dx_in = dx_mid;
        rms_backward(&mut dx_in, &mut gl.rms1, &dxh1, &lc.x_in, &lp.rms1, &lc.rstd1, d);
        dx = dx_in;
    }

    // Embedding backward (tied with the head).
    for (row, &tok) in tokens.iter().enumerate() {
        let dst = &mut grads.wte[tok as usize * d..(tok as usize + 1) * d];
        let src = &dx[row * d..(row + 1) * d];
        for (de, &se) in dst.iter_mut().zip(src) {
            *de += se;
        }
    }
}

/// Single-sequence forward pass producing per-position next-token logits.
pub fn forward<T: Scalar>(params: &Parameters<T>, tokens: &[u32]) -> Result<Logits<T>, LmError> {
    if tokens.is_empty() {
        return Err(LmError::Argument("empty token sequence".into()));
    }
    let cache = forward_batch(params, tokens, 1, tokens.len())?;
    Ok(cache.logits)
}

/// Per-row negative log-likelihood of `target` under the row's softmax.
pub fn row_nll<T: Scalar>(row: &[T], target: u32) -> T {
    log_sum_exp(row) - row[target as usize]
}

/// Mean next-token cross-entropy over all positions.
pub fn ntp_loss<T: Scalar>(logits: &Logits<T>, targets: &[u32]) -> Result<T, LmError> {
    if targets.len() != logits.rows {
        return Err(LmError::Shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows
        )));
    }
    if logits.rows == 0 {
        return Err(LmError::Argument("no positions to score".into()));
    }
    let total: T = (0..logits.rows).map(|i| row_nll(logits.row(i), targets[i])).sum();
    Ok(total / T::from_f64(logits.rows as f64))
}

/// The `k` most probable token ids, descending; ties break on ascending id.
pub fn topk_candidates<T: Scalar>(row: &[T], k: usize) -> Result<Vec<u32>, LmError> {
    if k == 0 || k > row.len() {
        return Err(LmError::Argument(format!(
            "k must be in 1..={}, got {k}",
            row.len()
        )));
    }
    let mut ids: Vec<u32> = (0..row.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        row[b as usize]
            .partial_cmp(&row[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    Ok(ids)
}

pub fn argmax_row<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// exp(mean per-position NLL) over the whole sequence.
pub fn sequence_perplexity<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[u32],
) -> Result<f64, LmError> {
    if tokens.len() < 2 {
        return Err(LmError::Argument("need at least 2 tokens for perplexity".into()));
    }
    let logits = forward(params, &tokens[..tokens.len() - 1])?;
    let loss = ntp_loss(&logits, &tokens[1..])?;
    Ok(loss.as_f64().exp())
}

/// Accuracy and perplexity over the target segments of held-out windows.
pub fn ntp_eval<T: Scalar>(
    params: &Parameters<T>,
    windows: &[crate::window::Window],
) -> Result<(f64, f64), LmError> {
    if windows.is_empty() {
        return Err(LmError::Argument("empty evaluation set".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut nll_sum = 0.0f64;
    const EVAL_BATCH: usize = 8;
    let s = windows[0].tokens.len();
    for group in windows.chunks(EVAL_BATCH) {
        if group.iter().any(|w| w.tokens.len() != s) {
            return Err(LmError::Shape("evaluation windows must share a length".into()));
        }
        let tokens: Vec<u32> = group.iter().flat_map(|w| w.tokens.iter().copied()).collect();
        let cache = forward_batch(params, &tokens, group.len(), s)?;
        for (wi, w) in group.iter().enumerate() {
            // Positions predicting the target segment: slots prompt_len-1 .. s-2
            // predict tokens prompt_len .. s-1.
            for slot in w.prompt_len.saturating_sub(1)..s - 1 {
                let row = cache.logits.row(wi * s + slot);
                let target = w.tokens[slot + 1];
                if argmax_row(row) == target {
                    hits += 1;
                }
                nll_sum += row_nll(row, target).as_f64();
                total += 1;
            }
        }
    }
    let accuracy = hits as f64 / total as f64;
    let perplexity = (nll_sum / total as f64).exp();
    Ok((accuracy, perplexity))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ECULOGV1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    tensors: Vec<(String, usize)>,
}

/// Writes a self-describing checkpoint: magic, JSON header, raw f32 data.
pub fn save_checkpoint(params: &Parameters<f32>, path: &Path) -> Result<(), LmError> {
    let mut tensors = Vec::new();
    params.for_each_tensor(|name, t| tensors.push((name, t.len())));
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    let mut data = Vec::with_capacity(params.parameter_count() * 4);
    params.for_each_tensor(|_, t| {
        for &v in t {
            data.extend_from_slice(&v.to_le_bytes());
        }
    });
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&data)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters<f32>, LmError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(LmError::Checkpoint("bad magic bytes".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(LmError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut params = Parameters::<f32>::init(&header.config)?;
    let mut order = header.tensors.iter();
    let mut failure: Option<String> = None;
    params.for_each_tensor_mut(|name, t| {
        if failure.is_some() {
            return;
        }
        match order.next() {
            Some((expect_name, expect_len)) if expect_name == name && *expect_len == t.len() => {
                let mut buf = [0u8; 4];
                for v in t.iter_mut() {
                    if file.read_exact(&mut buf).is_err() {
                        failure = Some("truncated tensor data".into());
                        return;
                    }
                    *v = f32::from_le_bytes(buf);
                }
            }
            other => {
                failure = Some(format!(
                    "tensor mismatch: expected {name} ({}), header has {other:?}",
                    t.len()
                ));
            }
        }
    });
    match failure {
        Some(msg) => Err(LmError::Checkpoint(msg)),
        None => Ok(params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::window::Window;
    use rand::Rng;

    fn tiny_params(vocab: usize, seed: u64) -> Parameters<f64> {
        Parameters::<f64>::init(&ModelConfig::tiny(vocab, seed)).unwrap()
    }

    #[test]
    fn single_token_gives_one_logit_row() {
        let p = tiny_params(11, 1);
        let logits = forward(&p, &[3]).unwrap();
        assert_eq!(logits.rows, 1);
        assert_eq!(logits.vocab, 11);
    }

    #[test]
    fn fresh_model_logits_are_finite_and_softmax_normalizes() {
        let p = tiny_params(17, 2);
        let logits = forward(&p, &[0, 5, 16, 2, 9]).unwrap();
        for i in 0..logits.rows {
            assert!(logits.row(i).iter().all(|v| v.is_finite()));
            let sm = logits.softmax_row(i);
            let sum: f64 = sm.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn future_token_edits_leave_past_logits_bitwise_unchanged() {
        let p = tiny_params(13, 3);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        for _ in 0..20 {
            let len = rng.gen_range(3..10);
            let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(0..13)).collect();
            let j = rng.gen_range(1..len);
            let mut edited = toks.clone();
            edited[j] = (edited[j] + 1 + rng.gen_range(0..12)) % 13;
            let a = forward(&p, &toks).unwrap();
            let b = forward(&p, &edited).unwrap();
            for i in 0..j {
                assert_eq!(a.row(i), b.row(i), "position {i} changed after editing {j}");
            }
        }
    }

    #[test]
    fn context_overflow_is_an_error() {
        let p = tiny_params(5, 1);
        let toks = vec![0u32; p.config.max_context + 1];
        assert!(matches!(forward(&p, &toks), Err(LmError::Context { .. })));
    }

    #[test]
    fn out_of_vocab_token_is_an_error() {
        let p = tiny_params(5, 1);
        assert!(matches!(forward(&p, &[0, 7]), Err(LmError::Vocab { .. })));
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let v = 23;
        let logits = Logits { data: vec![0.0f64; 2 * v], rows: 2, vocab: v };
        let loss = ntp_loss(&logits, &[1, 20]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let v = 8;
        let mut data = vec![0.0f64; v];
        data[3] = 50.0;
        let logits = Logits { data, rows: 1, vocab: v };
        let loss = ntp_loss(&logits, &[3]).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn two_position_loss_matches_hand_softmax() {
        // Row 0: logits [1, 2], target 0; row 1: logits [0, 0.5], target 1.
        let logits = Logits { data: vec![1.0f64, 2.0, 0.0, 0.5], rows: 2, vocab: 2 };
        let l0 = (1.0f64.exp() + 2.0f64.exp()).ln() - 1.0;
        let l1 = (0.0f64.exp() + 0.5f64.exp()).ln() - 0.5;
        let want = (l0 + l1) / 2.0;
        let got = ntp_loss(&logits, &[0, 1]).unwrap();
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn topk_breaks_ties_by_ascending_id() {
        let row = [0.1f64, 2.0, 2.0, -1.0];
        assert_eq!(topk_candidates(&row, 2).unwrap(), vec![1, 2]);
        assert_eq!(topk_candidates(&row, 4).unwrap(), vec![1, 2, 0, 3]);
        assert!(topk_candidates(&row, 0).is_err());
        assert!(topk_candidates(&row, 5).is_err());
    }

    #[test]
    fn perplexity_is_exp_of_loss() {
        let p = tiny_params(9, 5);
        let toks = [1u32, 4, 2, 8, 0, 3];
        let ppl = sequence_perplexity(&p, &toks).unwrap();
        let logits = forward(&p, &toks[..toks.len() - 1]).unwrap();
        let loss = ntp_loss(&logits, &toks[1..]).unwrap();
        assert!((ppl - loss.exp()).abs() / ppl < 1e-9);
        assert!(ppl >= 1.0);
    }

    #[test]
    fn perplexity_needs_two_tokens() {
        let p = tiny_params(9, 5);
        assert!(sequence_perplexity(&p, &[1]).is_err());
    }

    #[test]
    fn random_init_accuracy_is_near_chance_on_random_tokens() {
        let v = 31;
        let p = tiny_params(v as usize, 11);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let windows: Vec<Window> = (0..60)
            .map(|_| Window {
                tokens: (0..16).map(|_| rng.gen_range(0..v)).collect(),
                prompt_len: 8,
                source_offset: 0,
            })
            .collect();
        let (acc, _ppl) = ntp_eval(&p, &windows).unwrap();
        // Targets are uniform and independent of the model, so hits are
        // Binomial(n, 1/V); allow 3 sigma plus a small floor.
        let n = (60 * 8) as f64;
        let pc = 1.0 / v as f64;
        let sigma = (pc * (1.0 - pc) / n).sqrt();
        assert!(
            (acc - pc).abs() <= 3.0 * sigma + 1e-9,
            "accuracy {acc} vs chance {pc} (sigma {sigma})"
        );
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let cfg = ModelConfig::tiny(19, 4);
        let p = Parameters::<f32>::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let cfg = ModelConfig::tiny(19, 4);
        let a = Parameters::<f32>::init(&cfg).unwrap();
        let b = Parameters::<f32>::init(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        assert!(a.parameter_count() < 10_000);
    }
}
