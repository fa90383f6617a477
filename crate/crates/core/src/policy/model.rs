//! Forward pass with activation caching and the hand-derived backward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::policy::params::{Conditioning, LayerOffsets, PolicyParams};
use crate::seqcore::{AttributeId, ProteinSequence};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

// ---------------------------------------------------------------------------
// Row primitives shared with the incremental decoder. Keeping the operation
// order identical makes sampled probabilities bit-equal to scored ones.

/// `out = b + x W` with `W` of shape `x.len() x out.len()`, row-major.
#[inline]
pub(crate) fn linear_row(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let m = out.len();
    out.copy_from_slice(b);
    for (k, &xv) in x.iter().enumerate() {
        let row = &w[k * m..(k + 1) * m];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
}

/// Writes the normalized row and the affine output; returns `1 / std`.
#[inline]
pub(crate) fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..x.len() {
        xhat[j] = (x[j] - mean) * inv;
        y[j] = xhat[j] * g[j] + b[j];
    }
    inv
}

#[inline]
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Key/value source for one attention head: rows of `stride` values with the
/// head's slice starting at `offset`.
#[derive(Clone, Copy)]
pub(crate) struct HeadSource<'a> {
    pub keys: &'a [f64],
    pub values: &'a [f64],
    pub stride: usize,
    pub key_offset: usize,
    pub value_offset: usize,
    pub count: usize,
}

/// Softmax attention of one query over prefix positions then token positions.
/// `probs` receives `prefix.count + tokens.count` weights.
#[inline]
pub(crate) fn attend_head(
    q: &[f64],
    scale: f64,
    prefix: HeadSource<'_>,
    tokens: HeadSource<'_>,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let dh = q.len();
    let mut max = f64::NEG_INFINITY;
    let mut idx = 0;
    for src in [prefix, tokens] {
        for j in 0..src.count {
            let k = &src.keys[j * src.stride + src.key_offset..j * src.stride + src.key_offset + dh];
            let s = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
            probs[idx] = s;
            max = max.max(s);
            idx += 1;
        }
    }
    let mut total = 0.0;
    for p in probs[..idx].iter_mut() {
        *p = (*p - max).exp();
        total += *p;
    }
    for p in probs[..idx].iter_mut() {
        *p /= total;
    }
    out.fill(0.0);
    let mut idx = 0;
    for src in [prefix, tokens] {
        for j in 0..src.count {
            let v = &src.values
                [j * src.stride + src.value_offset..j * src.stride + src.value_offset + dh];
            let p = probs[idx];
            for (o, vv) in out.iter_mut().zip(v) {
                *o += p * vv;
            }
            idx += 1;
        }
    }
}

/// Log-softmax of one row of logits, written in place of `logp`.
#[inline]
pub(crate) fn log_softmax_row(logits: &[f64], logp: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    for (o, l) in logp.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

// ---------------------------------------------------------------------------

struct LayerCache {
    ln1_xhat: Vec<f64>,
    ln1_inv: Vec<f64>,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_inv: Vec<f64>,
    c: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
}

/// Activations of one teacher-forced pass, kept for the backward pass.
pub struct ForwardCache {
    inputs: Vec<usize>,
    targets: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf_xhat: Vec<f64>,
    lnf_inv: Vec<f64>,
    hf: Vec<f64>,
    logp: Vec<f64>,
    logprob: f64,
}

impl ForwardCache {
    /// Sum of target log-probabilities.
    pub fn logprob(&self) -> f64 {
        self.logprob
    }

    /// Number of scored next-token predictions.
    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    /// Log-probabilities over output classes at position `i`.
    pub fn step_logprobs(&self, i: usize, n_outputs: usize) -> &[f64] {
        &self.logp[i * n_outputs..(i + 1) * n_outputs]
    }
}

/// Inputs `[BOS, r_1..r_l]` and targets `[r_1..r_l, EOS]`; without
/// termination the final EOS target is dropped (a sequence cut at a length cap).
pub fn teacher_forcing(params: &PolicyParams, residues: &[usize], terminated: bool) -> (Vec<usize>, Vec<usize>) {
    let vocab = &params.vocab;
    let mut inputs = Vec::with_capacity(residues.len() + 1);
    inputs.push(vocab.bos());
    inputs.extend_from_slice(residues);
    let mut targets = residues.to_vec();
    if terminated {
        targets.push(vocab.eos());
    } else {
        inputs.pop();
    }
    (inputs, targets)
}

fn slice(v: &[f64], off: usize, len: usize) -> &[f64] {
    &v[off..off + len]
}

/// Teacher-forced forward pass. `targets[i]` is scored against the output at
/// input position `i`.
pub fn forward(
    params: &PolicyParams,
    cond: &Conditioning,
    inputs: &[usize],
    targets: &[usize],
) -> Result<ForwardCache> {
    let cfg = &params.config;
    let (d, nh, dh, ff) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff);
    let n = inputs.len();
    let m = cond.len();
    let nout = params.vocab.n_outputs();
    if n == 0 || targets.len() != n {
        return Err(Error::InvalidArgument("inputs and targets must be non-empty and aligned".into()));
    }
    if m + n > cfg.context || n > cfg.context {
        return Err(Error::ContextOverflow {
            needed: m + n,
            context: cfg.context,
        });
    }
    if let Some(&t) = inputs.iter().find(|&&t| t >= params.vocab.n_tokens()) {
        return Err(Error::InvalidArgument(format!("token id {t} out of range")));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= nout) {
        return Err(Error::InvalidArgument(format!("target id {t} out of range")));
    }
    let lay = &params.layout;
    let w = &params.values;

    let mut x = vec![0.0; n * d];
    for (i, &tok) in inputs.iter().enumerate() {
        let te = slice(w, lay.tok_emb + tok * d, d);
        let pe = slice(w, lay.pos_emb + i * d, d);
        for j in 0..d {
            x[i * d + j] = te[j] + pe[j];
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let width = m + n;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut tmp_d = vec![0.0; d];
    for (l, off) in lay.layers.iter().enumerate() {
        let mut lc = LayerCache {
            ln1_xhat: vec![0.0; n * d],
            ln1_inv: vec![0.0; n],
            a: vec![0.0; n * d],
            qkv: vec![0.0; n * 3 * d],
            probs: vec![0.0; nh * n * width],
            o: vec![0.0; n * d],
            ln2_xhat: vec![0.0; n * d],
            ln2_inv: vec![0.0; n],
            c: vec![0.0; n * d],
            u: vec![0.0; n * ff],
            z: vec![0.0; n * ff],
        };
        for i in 0..n {
            lc.ln1_inv[i] = layer_norm_row(
                &x[i * d..(i + 1) * d],
                slice(w, off.ln1_g, d),
                slice(w, off.ln1_b, d),
                &mut lc.ln1_xhat[i * d..(i + 1) * d],
                &mut lc.a[i * d..(i + 1) * d],
            );
            linear_row(
                &lc.a[i * d..(i + 1) * d],
                slice(w, off.w_qkv, d * 3 * d),
                slice(w, off.b_qkv, 3 * d),
                &mut lc.qkv[i * 3 * d..(i + 1) * 3 * d],
            );
        }
        let pk = cond.block(l, 0);
        let pv = cond.block(l, 1);
        for i in 0..n {
            for h in 0..nh {
                let q = &lc.qkv[i * 3 * d + h * dh..i * 3 * d + (h + 1) * dh];
                let prefix = HeadSource {
                    keys: pk,
                    values: pv,
                    stride: d,
                    key_offset: h * dh,
                    value_offset: h * dh,
                    count: m,
                };
                let toks = HeadSource {
                    keys: &lc.qkv,
                    values: &lc.qkv,
                    stride: 3 * d,
                    key_offset: d + h * dh,
                    value_offset: 2 * d + h * dh,
                    count: i + 1,
                };
                let pbase = (h * n + i) * width;
                attend_head(
                    q,
                    scale,
                    prefix,
                    toks,
                    &mut lc.probs[pbase..pbase + m + i + 1],
                    &mut lc.o[i * d + h * dh..i * d + (h + 1) * dh],
                );
            }
        }
        for i in 0..n {
            linear_row(
                &lc.o[i * d..(i + 1) * d],
                slice(w, off.w_o, d * d),
                slice(w, off.b_o, d),
                &mut tmp_d,
            );
            for (xv, av) in x[i * d..(i + 1) * d].iter_mut().zip(&tmp_d) {
                *xv += av;
            }
            lc.ln2_inv[i] = layer_norm_row(
                &x[i * d..(i + 1) * d],
                slice(w, off.ln2_g, d),
                slice(w, off.ln2_b, d),
                &mut lc.ln2_xhat[i * d..(i + 1) * d],
                &mut lc.c[i * d..(i + 1) * d],
            );
            linear_row(
                &lc.c[i * d..(i + 1) * d],
                slice(w, off.w_1, d * ff),
                slice(w, off.b_1, ff),
                &mut lc.u[i * ff..(i + 1) * ff],
            );
            for (zv, uv) in lc.z[i * ff..(i + 1) * ff].iter_mut().zip(&lc.u[i * ff..(i + 1) * ff]) {
                *zv = gelu(*uv);
            }
            linear_row(
                &lc.z[i * ff..(i + 1) * ff],
                slice(w, off.w_2, ff * d),
                slice(w, off.b_2, d),
                &mut tmp_d,
            );
            for (xv, fv) in x[i * d..(i + 1) * d].iter_mut().zip(&tmp_d) {
                *xv += fv;
            }
        }
        layers.push(lc);
    }

    let mut lnf_xhat = vec![0.0; n * d];
    let mut lnf_inv = vec![0.0; n];
    let mut hf = vec![0.0; n * d];
    let mut logits = vec![0.0; nout];
    let mut logp = vec![0.0; n * nout];
    let mut logprob = 0.0;
    for i in 0..n {
        lnf_inv[i] = layer_norm_row(
            &x[i * d..(i + 1) * d],
            slice(w, lay.lnf_g, d),
            slice(w, lay.lnf_b, d),
            &mut lnf_xhat[i * d..(i + 1) * d],
            &mut hf[i * d..(i + 1) * d],
        );
        linear_row(
            &hf[i * d..(i + 1) * d],
            slice(w, lay.w_out, d * nout),
            slice(w, lay.b_out, nout),
            &mut logits,
        );
        log_softmax_row(&logits, &mut logp[i * nout..(i + 1) * nout]);
        logprob += logp[i * nout + targets[i]];
    }

    Ok(ForwardCache {
        inputs: inputs.to_vec(),
        targets: targets.to_vec(),
        layers,
        lnf_xhat,
        lnf_inv,
        hf,
        logp,
        logprob,
    })
}

/// `dx = dy W^T`, accumulating `gw += x^T dy` and `gb += sum_rows dy`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    k: usize,
    m: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    dx: &mut [f64],
) {
    let n = dy.len() / m;
    for i in 0..n {
        let dyi = &dy[i * m..(i + 1) * m];
        if dyi.iter().all(|&v| v == 0.0) {
            dx[i * k..(i + 1) * k].fill(0.0);
            continue;
        }
        let xi = &x[i * k..(i + 1) * k];
        for kk in 0..k {
            let wrow = &w[kk * m..(kk + 1) * m];
            dx[i * k + kk] = wrow.iter().zip(dyi).map(|(a, b)| a * b).sum();
            let xv = xi[kk];
            if xv != 0.0 {
                for (g, dv) in gw[kk * m..(kk + 1) * m].iter_mut().zip(dyi) {
                    *g += xv * dv;
                }
            }
        }
        for (g, dv) in gb.iter_mut().zip(dyi) {
            *g += dv;
        }
    }
}

/// LayerNorm backward; adds into `dx`.
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv: &[f64],
    g: &[f64],
    gg: &mut [f64],
    gb: &mut [f64],
    dx: &mut [f64],
) {
    let d = g.len();
    let n = inv.len();
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyi = &dy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            gg[j] += dyi[j] * xh[j];
            gb[j] += dyi[j];
            dxhat[j] = dyi[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx[i * d + j] += inv[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

fn split_grad(g: &mut [f64], off: usize, len: usize) -> &mut [f64] {
    &mut g[off..off + len]
}

/// Back-propagates `weight * d(logprob)` into `trunk_grad` (layout of the trunk
/// parameters) and `cond_grad` (layout of the conditioning).
pub fn backward(
    params: &PolicyParams,
    cond: &Conditioning,
    cache: &ForwardCache,
    weight: f64,
    trunk_grad: &mut [f64],
    cond_grad: &mut [f64],
) {
    let cfg = &params.config;
    let (d, nh, dh, ff) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff);
    let n = cache.inputs.len();
    let m = cond.len();
    let width = m + n;
    let nout = params.vocab.n_outputs();
    let lay = &params.layout;
    let w = &params.values;
    let scale = 1.0 / (dh as f64).sqrt();

    // d logprob / d logits = onehot(target) - p
    let mut dlogits = vec![0.0; n * nout];
    for i in 0..n {
        for c in 0..nout {
            let p = cache.logp[i * nout + c].exp();
            let onehot = if c == cache.targets[i] { 1.0 } else { 0.0 };
            dlogits[i * nout + c] = weight * (onehot - p);
        }
    }

    let mut dhf = vec![0.0; n * d];
    {
        let (head, tail) = trunk_grad.split_at_mut(lay.b_out);
        linear_backward(
            &cache.hf,
            slice(w, lay.w_out, d * nout),
            &dlogits,
            d,
            nout,
            &mut head[lay.w_out..lay.w_out + d * nout],
            &mut tail[..nout],
            &mut dhf,
        );
    }
    let mut dx = vec![0.0; n * d];
    {
        let (head, tail) = trunk_grad.split_at_mut(lay.lnf_b);
        layer_norm_backward(
            &dhf,
            &cache.lnf_xhat,
            &cache.lnf_inv,
            slice(w, lay.lnf_g, d),
            &mut head[lay.lnf_g..lay.lnf_g + d],
            &mut tail[..d],
            &mut dx,
        );
    }

    let mut dz = vec![0.0; n * ff];
    let mut dc = vec![0.0; n * d];
    let mut do_ = vec![0.0; n * d];
    let mut dqkv = vec![0.0; n * 3 * d];
    let mut da = vec![0.0; n * d];
    let mut dp = vec![0.0; width];
    for (l, off) in lay.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let LayerOffsets {
            ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2,
        } = *off;

        // MLP branch.
        {
            let (head, tail) = trunk_grad.split_at_mut(b_2);
            linear_backward(&lc.z, slice(w, w_2, ff * d), &dx, ff, d, &mut head[w_2..w_2 + ff * d], &mut tail[..d], &mut dz);
        }
        for (g, u) in dz.iter_mut().zip(&lc.u) {
            *g *= gelu_grad(*u);
        }
        {
            let (head, tail) = trunk_grad.split_at_mut(b_1);
            linear_backward(&lc.c, slice(w, w_1, d * ff), &dz, d, ff, &mut head[w_1..w_1 + d * ff], &mut tail[..ff], &mut dc);
        }
        {
            let (head, tail) = trunk_grad.split_at_mut(ln2_b);
            layer_norm_backward(&dc, &lc.ln2_xhat, &lc.ln2_inv, slice(w, ln2_g, d), &mut head[ln2_g..ln2_g + d], &mut tail[..d], &mut dx);
        }

        // Attention branch.
        {
            let (head, tail) = trunk_grad.split_at_mut(b_o);
            linear_backward(&lc.o, slice(w, w_o, d * d), &dx, d, d, &mut head[w_o..w_o + d * d], &mut tail[..d], &mut do_);
        }
        dqkv.fill(0.0);
        let pk = cond.block(l, 0);
        let pv = cond.block(l, 1);
        let pk_off = cond.block_offset(l, 0);
        let pv_off = cond.block_offset(l, 1);
        for h in 0..nh {
            for i in 0..n {
                let probs = &lc.probs[(h * n + i) * width..(h * n + i) * width + m + i + 1];
                let doi = &do_[i * d + h * dh..i * d + (h + 1) * dh];
                let mut sum = 0.0;
                for (j, p) in probs.iter().enumerate() {
                    let v = if j < m {
                        &pv[j * d + h * dh..j * d + (h + 1) * dh]
                    } else {
                        let t = j - m;
                        &lc.qkv[t * 3 * d + 2 * d + h * dh..t * 3 * d + 2 * d + (h + 1) * dh]
                    };
                    dp[j] = doi.iter().zip(v).map(|(a, b)| a * b).sum();
                    sum += p * dp[j];
                }
                let qi_off = i * 3 * d + h * dh;
                for (j, &p) in probs.iter().enumerate() {
                    let ds = p * (dp[j] - sum) * scale;
                    if j < m {
                        for e in 0..dh {
                            dqkv[qi_off + e] += ds * pk[j * d + h * dh + e];
                            cond_grad[pk_off + j * d + h * dh + e] += ds * lc.qkv[qi_off + e];
                            cond_grad[pv_off + j * d + h * dh + e] += p * doi[e];
                        }
                    } else {
                        let t = j - m;
                        let k_off = t * 3 * d + d + h * dh;
                        let v_off = t * 3 * d + 2 * d + h * dh;
                        for e in 0..dh {
                            dqkv[qi_off + e] += ds * lc.qkv[k_off + e];
                            dqkv[k_off + e] += ds * lc.qkv[qi_off + e];
                            dqkv[v_off + e] += p * doi[e];
                        }
                    }
                }
            }
        }
        {
            let (head, tail) = trunk_grad.split_at_mut(b_qkv);
            linear_backward(&lc.a, slice(w, w_qkv, d * 3 * d), &dqkv, d, 3 * d, &mut head[w_qkv..w_qkv + 3 * d * d], &mut tail[..3 * d], &mut da);
        }
        {
            let (head, tail) = trunk_grad.split_at_mut(ln1_b);
            layer_norm_backward(&da, &lc.ln1_xhat, &lc.ln1_inv, slice(w, ln1_g, d), &mut head[ln1_g..ln1_g + d], &mut tail[..d], &mut dx);
        }
    }

    for (i, &tok) in cache.inputs.iter().enumerate() {
        let dxi = &dx[i * d..(i + 1) * d];
        for (g, v) in split_grad(trunk_grad, lay.tok_emb + tok * d, d).iter_mut().zip(dxi) {
            *g += v;
        }
        for (g, v) in split_grad(trunk_grad, lay.pos_emb + i * d, d).iter_mut().zip(dxi) {
            *g += v;
        }
    }
}

/// Exact log-likelihood of a residue-index sequence, including the EOS step
/// when `terminated`.
pub fn logprob_tokens(
    params: &PolicyParams,
    cond: &Conditioning,
    residues: &[usize],
    terminated: bool,
) -> Result<f64> {
    let (inputs, targets) = teacher_forcing(params, residues, terminated);
    if inputs.is_empty() {
        // Truncated empty sequence: probability one.
        return Ok(0.0);
    }
    Ok(forward(params, cond, &inputs, &targets)?.logprob())
}

/// `sum_i log p(a_i | a_<i, prefix) + log p(EOS | a, prefix)`.
pub fn logprob(params: &PolicyParams, cond: &Conditioning, sequence: &ProteinSequence) -> Result<f64> {
    let ids = params.vocab.encode(sequence)?;
    logprob_tokens(params, cond, &ids, true)
}

/// Gradient buffers for the trunk and every prefix touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub trunk: Vec<f64>,
    pub prefixes: BTreeMap<AttributeId, Vec<f64>>,
}

impl Gradients {
    pub fn zeros(params: &PolicyParams) -> Self {
        Gradients {
            trunk: vec![0.0; params.values.len()],
            prefixes: BTreeMap::new(),
        }
    }

    /// Runs [`backward`] and routes the conditioning gradient to its prefixes.
    pub fn accumulate(
        &mut self,
        params: &PolicyParams,
        cond: &Conditioning,
        cache: &ForwardCache,
        weight: f64,
    ) {
        let mut cond_grad = vec![0.0; cond.data.len()];
        backward(params, cond, cache, weight, &mut self.trunk, &mut cond_grad);
        cond.scatter_grad(&cond_grad, &mut self.prefixes);
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.trunk.iter_mut() {
            *g *= s;
        }
        for p in self.prefixes.values_mut() {
            for g in p.iter_mut() {
                *g *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        let t: f64 = self.trunk.iter().map(|g| g * g).sum();
        let p: f64 = self.prefixes.values().flatten().map(|g| g * g).sum();
        (t + p).sqrt()
    }
}
