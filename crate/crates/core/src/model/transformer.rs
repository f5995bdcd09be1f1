use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{ModelConfig, ModelParams, TokenSequence};
use crate::adapters::{AdapterSet, LoraAdapter};
use crate::error::{param_err, shape_err, Result, UlabError};
use crate::numerics::{gemm, matmul, matmul_nt, softmax_into, Matrix, Trans};
use crate::objectives::{sequence_term, LossBreakdown, ObjectiveSpec, TermKind};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Gradient mapping keyed by trainable tensor name.
pub type Gradients = BTreeMap<String, Matrix>;

/// Sequences for one optimization step. `forget` is the main batch (the
/// training batch for the LM objective); `retain` feeds the retention term.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub forget: &'a [TokenSequence],
    pub retain: Option<&'a [TokenSequence]>,
}

impl<'a> Batch<'a> {
    pub fn new(forget: &'a [TokenSequence]) -> Self {
        Self { forget, retain: None }
    }

    pub fn with_retain(forget: &'a [TokenSequence], retain: &'a [TokenSequence]) -> Self {
        Self {
            forget,
            retain: Some(retain),
        }
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (t, d) = x.shape();
    let mut xhat = Matrix::zeros(t, d);
    let mut y = Matrix::zeros(t, d);
    let mut inv_std = Vec::with_capacity(t);
    let g = gain.as_slice();
    let b = bias.as_slice();
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xh[j] * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates gain/bias gradients when requested.
fn layer_norm_backward(dy: &Matrix, gain: &Matrix, cache: &LnCache, dparams: Option<(&mut Matrix, &mut Matrix)>) -> Matrix {
    let (t, d) = dy.shape();
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(t, d);
    let mut dxhat = vec![0.0; d];
    if let Some((dg, db)) = dparams {
        let dg = dg.as_mut_slice();
        let db = db.as_mut_slice();
        for i in 0..t {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
            }
        }
    }
    for i in 0..t {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
        }
        let inv = cache.inv_std[i];
        let dxr = dx.row_mut(i);
        for j in 0..d {
            dxr[j] = inv * (dxhat[j] - (s1 + xh[j] * s2) / d as f64);
        }
    }
    dx
}

/// `y = x Wᵀ + (x Aᵀ) Bᵀ`; returns `y` and the adapter bottleneck `x Aᵀ`.
pub(crate) fn linear(x: &Matrix, w: &Matrix, adapter: Option<&LoraAdapter>) -> (Matrix, Option<Matrix>) {
    let mut y = matmul_nt(x, w).expect("linear shapes follow the config");
    let u = adapter.map(|ad| {
        let u = matmul_nt(x, &ad.a).expect("adapter shapes checked on attach");
        gemm(1.0, &u, Trans::No, &ad.b, Trans::Yes, 1.0, &mut y).expect("adapter shapes checked on attach");
        u
    });
    (y, u)
}

struct LinearGrads<'g> {
    dw: Option<&'g mut Matrix>,
    da: Option<&'g mut Matrix>,
    db: Option<&'g mut Matrix>,
}

/// Backward through [`linear`]; returns `dx`.
fn linear_backward(dy: &Matrix, x: &Matrix, w: &Matrix, adapter: Option<(&LoraAdapter, &Matrix)>, g: LinearGrads<'_>) -> Matrix {
    if let Some(dw) = g.dw {
        gemm(1.0, dy, Trans::Yes, x, Trans::No, 1.0, dw).expect("grad shapes");
    }
    let mut dx = matmul(dy, w).expect("grad shapes");
    if let Some((ad, u)) = adapter {
        if let Some(db) = g.db {
            gemm(1.0, dy, Trans::Yes, u, Trans::No, 1.0, db).expect("grad shapes");
        }
        let du = matmul(dy, &ad.b).expect("grad shapes");
        if let Some(da) = g.da {
            gemm(1.0, &du, Trans::Yes, x, Trans::No, 1.0, da).expect("grad shapes");
        }
        gemm(1.0, &du, Trans::No, &ad.a, Trans::No, 1.0, &mut dx).expect("grad shapes");
    }
    dx
}

pub(crate) struct LayerCache {
    ln1: LnCache,
    a1: Matrix,
    q: Matrix,
    pub(crate) k: Matrix,
    pub(crate) v: Matrix,
    u_q: Option<Matrix>,
    u_k: Option<Matrix>,
    u_v: Option<Matrix>,
    probs: Vec<Matrix>,
    ctx: Matrix,
    u_o: Option<Matrix>,
    ln2: LnCache,
    a2: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
    u_in: Option<Matrix>,
    u_out: Option<Matrix>,
}

pub(crate) struct ForwardCache {
    pub(crate) layers: Vec<LayerCache>,
    final_ln: LnCache,
    h_final: Matrix,
}

pub(crate) fn adapter_for<'a>(adapters: Option<&'a AdapterSet>, name: &str) -> Option<&'a LoraAdapter> {
    adapters.and_then(|a| a.get(name))
}

fn check_tokens(config: &ModelConfig, x: &[u32]) -> Result<()> {
    if x.is_empty() {
        return shape_err("empty token sequence");
    }
    if x.len() > config.max_seq {
        return shape_err(format!(
            "sequence length {} exceeds max_seq {}",
            x.len(),
            config.max_seq
        ));
    }
    if let Some(t) = x.iter().find(|&&t| t as usize >= config.vocab_size) {
        return shape_err(format!("token {t} outside vocabulary of {}", config.vocab_size));
    }
    Ok(())
}

/// Causal multi-head attention for a block of queries against a key/value
/// history. Query `i` attends to keys `0..=offset + i`.
pub(crate) fn attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize, offset: usize, mut keep: Option<&mut Vec<Matrix>>) -> Matrix {
    let (t, d) = q.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_keys = k.rows();
    let mut ctx = Matrix::zeros(t, d);
    let mut scores = vec![0.0; n_keys];
    for h in 0..n_heads {
        let off = h * dh;
        let mut probs = Matrix::zeros(t, n_keys);
        for i in 0..t {
            let visible = offset + i + 1;
            let qi = &q.row(i)[off..off + dh];
            for j in 0..visible {
                let kj = &k.row(j)[off..off + dh];
                scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let pr = &mut probs.row_mut(i)[..visible];
            softmax_into(&scores[..visible], pr);
            let cr = &mut ctx.row_mut(i)[off..off + dh];
            for (j, &p) in pr.iter().enumerate() {
                let vj = &v.row(j)[off..off + dh];
                for (c, &vv) in cr.iter_mut().zip(vj) {
                    *c += p * vv;
                }
            }
        }
        if let Some(keep) = keep.as_deref_mut() {
            keep.push(probs);
        }
    }
    ctx
}

pub(crate) fn forward_cached(params: &ModelParams, adapters: Option<&AdapterSet>, x: &[u32]) -> Result<(Matrix, ForwardCache)> {
    let cfg = &params.config;
    check_tokens(cfg, x)?;
    if let Some(ad) = adapters {
        ad.check_against(params)?;
    }
    let t = x.len();
    let d = cfg.d_model;
    let tok = params.t("emb.tok");
    let pos = params.t("emb.pos");
    let mut h = Matrix::zeros(t, d);
    for (i, &token) in x.iter().enumerate() {
        let row = h.row_mut(i);
        for ((o, a), b) in row.iter_mut().zip(tok.row(token as usize)).zip(pos.row(i)) {
            *o = a + b;
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let name = |s: &str| format!("blk{l}.{s}");
        let (a1, ln1) = layer_norm(&h, params.t(&name("ln1.gain")), params.t(&name("ln1.bias")));
        let (q, u_q) = linear(&a1, params.t(&name("q")), adapter_for(adapters, &name("q")));
        let (k, u_k) = linear(&a1, params.t(&name("k")), adapter_for(adapters, &name("k")));
        let (v, u_v) = linear(&a1, params.t(&name("v")), adapter_for(adapters, &name("v")));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        let ctx = attention(&q, &k, &v, cfg.n_heads, 0, Some(&mut probs));
        let (att_out, u_o) = linear(&ctx, params.t(&name("o")), adapter_for(adapters, &name("o")));
        let mut h_mid = h;
        h_mid.axpy(1.0, &att_out)?;

        let (a2, ln2) = layer_norm(&h_mid, params.t(&name("ln2.gain")), params.t(&name("ln2.bias")));
        let (ff_pre, u_in) = linear(&a2, params.t(&name("ffn.in")), adapter_for(adapters, &name("ffn.in")));
        let ff_act = ff_pre.map(gelu);
        let (ff_out, u_out) = linear(&ff_act, params.t(&name("ffn.out")), adapter_for(adapters, &name("ffn.out")));
        h = h_mid;
        h.axpy(1.0, &ff_out)?;

        layers.push(LayerCache {
            ln1,
            a1,
            q,
            k,
            v,
            u_q,
            u_k,
            u_v,
            probs,
            ctx,
            u_o,
            ln2,
            a2,
            ff_pre,
            ff_act,
            u_in,
            u_out,
        });
    }
    let (h_final, final_ln) = layer_norm(&h, params.t("final_ln.gain"), params.t("final_ln.bias"));
    let logits = matmul_nt(&h_final, params.t("head"))?;
    if !logits.is_finite() {
        return Err(UlabError::NonFinite {
            tensor: first_non_finite(params, adapters).unwrap_or_else(|| "logits".into()),
        });
    }
    Ok((logits, ForwardCache { layers, final_ln, h_final }))
}

fn first_non_finite(params: &ModelParams, adapters: Option<&AdapterSet>) -> Option<String> {
    params
        .tensors()
        .iter()
        .find(|(_, m)| !m.is_finite())
        .map(|(n, _)| n.clone())
        .or_else(|| {
            adapters.and_then(|ad| {
                ad.iter().find_map(|(n, a)| {
                    if !a.a.is_finite() {
                        Some(format!("{n}.lora_a"))
                    } else if !a.b.is_finite() {
                        Some(format!("{n}.lora_b"))
                    } else {
                        None
                    }
                })
            })
        })
}

/// Logits (`T x V`) for `x`; row `t` only depends on `x[..=t]`.
pub fn forward(params: &ModelParams, adapters: Option<&AdapterSet>, x: &[u32]) -> Result<Matrix> {
    forward_cached(params, adapters, x).map(|(l, _)| l)
}

/// Trainable gradient buffers for one backward pass.
fn zero_grads(params: &ModelParams, adapters: Option<&AdapterSet>) -> Gradients {
    match adapters {
        Some(ad) => ad
            .iter()
            .flat_map(|(name, a)| {
                [
                    (format!("{name}.lora_a"), Matrix::zeros(a.a.rows(), a.a.cols())),
                    (format!("{name}.lora_b"), Matrix::zeros(a.b.rows(), a.b.cols())),
                ]
            })
            .collect(),
        None => params
            .tensors()
            .iter()
            .map(|(n, m)| (n.clone(), Matrix::zeros(m.rows(), m.cols())))
            .collect(),
    }
}

struct GradSink<'a> {
    grads: &'a mut Gradients,
    adapter_mode: bool,
}

impl GradSink<'_> {
    fn param(&mut self, name: &str) -> Option<&mut Matrix> {
        if self.adapter_mode {
            None
        } else {
            self.grads.get_mut(name)
        }
    }

    /// Gradient slots for a linear layer named `name`.
    fn linear(&mut self, name: &str) -> LinearGrads<'_> {
        if self.adapter_mode {
            let a_key = format!("{name}.lora_a");
            let b_key = format!("{name}.lora_b");
            // split borrows of two distinct keys
            let mut da = None;
            let mut db = None;
            for (k, m) in self.grads.iter_mut() {
                if *k == a_key {
                    da = Some(m);
                } else if *k == b_key {
                    db = Some(m);
                }
            }
            LinearGrads { dw: None, da, db }
        } else {
            LinearGrads {
                dw: self.grads.get_mut(name),
                da: None,
                db: None,
            }
        }
    }

    fn layer_norm(&mut self, prefix: &str) -> Option<(&mut Matrix, &mut Matrix)> {
        if self.adapter_mode {
            return None;
        }
        let gk = format!("{prefix}.gain");
        let bk = format!("{prefix}.bias");
        let mut dg = None;
        let mut db = None;
        for (k, m) in self.grads.iter_mut() {
            if *k == gk {
                dg = Some(m);
            } else if *k == bk {
                db = Some(m);
            }
        }
        dg.zip(db)
    }
}

fn backward(params: &ModelParams, adapters: Option<&AdapterSet>, x: &[u32], cache: &ForwardCache, dlogits: &Matrix, grads: &mut Gradients) -> Result<()> {
    let cfg = &params.config;
    let mut sink = GradSink {
        grads,
        adapter_mode: adapters.is_some(),
    };
    let head = params.t("head");
    if let Some(dhead) = sink.param("head") {
        gemm(1.0, dlogits, Trans::Yes, &cache.h_final, Trans::No, 1.0, dhead)?;
    }
    let dh_final = matmul(dlogits, head)?;
    let mut dh = layer_norm_backward(&dh_final, params.t("final_ln.gain"), &cache.final_ln, sink.layer_norm("final_ln"));

    let dh_size = cfg.head_dim();
    let scale = 1.0 / (dh_size as f64).sqrt();
    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let name = |s: &str| format!("blk{l}.{s}");

        // feed-forward branch
        let n_out = name("ffn.out");
        let ad_out = adapter_for(adapters, &n_out).zip(lc.u_out.as_ref());
        let dact = linear_backward(&dh, &lc.ff_act, params.t(&n_out), ad_out, sink.linear(&n_out));
        let mut dpre = dact;
        for (g, &p) in dpre.as_mut_slice().iter_mut().zip(lc.ff_pre.as_slice()) {
            *g *= gelu_grad(p);
        }
        let n_in = name("ffn.in");
        let ad_in = adapter_for(adapters, &n_in).zip(lc.u_in.as_ref());
        let da2 = linear_backward(&dpre, &lc.a2, params.t(&n_in), ad_in, sink.linear(&n_in));
        let dmid = layer_norm_backward(&da2, params.t(&name("ln2.gain")), &lc.ln2, sink.layer_norm(&name("ln2")));
        dh.axpy(1.0, &dmid)?;

        // attention branch
        let n_o = name("o");
        let ad_o = adapter_for(adapters, &n_o).zip(lc.u_o.as_ref());
        let dctx = linear_backward(&dh, &lc.ctx, params.t(&n_o), ad_o, sink.linear(&n_o));
        let t = x.len();
        let d = cfg.d_model;
        let mut dq = Matrix::zeros(t, d);
        let mut dk = Matrix::zeros(t, d);
        let mut dv = Matrix::zeros(t, d);
        let mut dp = vec![0.0; t];
        for hd in 0..cfg.n_heads {
            let off = hd * dh_size;
            let probs = &lc.probs[hd];
            for i in 0..t {
                let dci = &dctx.row(i)[off..off + dh_size];
                let pr = &probs.row(i)[..=i];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = &lc.v.row(j)[off..off + dh_size];
                    dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += dp[j] * pr[j];
                    let dvj = &mut dv.row_mut(j)[off..off + dh_size];
                    for (o, &c) in dvj.iter_mut().zip(dci) {
                        *o += pr[j] * c;
                    }
                }
                for j in 0..=i {
                    let ds = pr[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lc.k.row(j)[off..off + dh_size];
                    let dqi = &mut dq.row_mut(i)[off..off + dh_size];
                    for (o, &kk) in dqi.iter_mut().zip(kj) {
                        *o += ds * kk;
                    }
                    let qi = &lc.q.row(i)[off..off + dh_size];
                    let dkj = &mut dk.row_mut(j)[off..off + dh_size];
                    for (o, &qq) in dkj.iter_mut().zip(qi) {
                        *o += ds * qq;
                    }
                }
            }
        }
        let mut da1 = Matrix::zeros(t, d);
        for (p, dy, u) in [("q", &dq, &lc.u_q), ("k", &dk, &lc.u_k), ("v", &dv, &lc.u_v)] {
            let n = name(p);
            let ad = adapter_for(adapters, &n).zip(u.as_ref());
            let part = linear_backward(dy, &lc.a1, params.t(&n), ad, sink.linear(&n));
            da1.axpy(1.0, &part)?;
        }
        let dx_ln = layer_norm_backward(&da1, params.t(&name("ln1.gain")), &lc.ln1, sink.layer_norm(&name("ln1")));
        dh.axpy(1.0, &dx_ln)?;
    }

    if let Some(dtok) = sink.param("emb.tok") {
        for (i, &token) in x.iter().enumerate() {
            for (o, g) in dtok.row_mut(token as usize).iter_mut().zip(dh.row(i)) {
                *o += g;
            }
        }
    }
    if let Some(dpos) = sink.param("emb.pos") {
        for i in 0..x.len() {
            for (o, g) in dpos.row_mut(i).iter_mut().zip(dh.row(i)) {
                *o += g;
            }
        }
    }
    Ok(())
}

/// Loss and gradient of a single sequence's term, scaled by `scale`.
fn sequence_grads(params: &ModelParams, adapters: Option<&AdapterSet>, term: TermKind, x: &[u32], scale: f64) -> Result<(f64, Gradients)> {
    let (logits, cache) = forward_cached(params, adapters, x)?;
    let (loss, dlogits) = sequence_term(term, &logits, x, scale)?;
    let mut g = zero_grads(params, adapters);
    backward(params, adapters, x, &cache, &dlogits, &mut g)?;
    Ok((loss, g))
}

/// Accumulated loss/gradient of `term` averaged over `seqs`. Per-sequence
/// work fans out on the rayon pool and is reduced in sequence order.
fn batch_term(params: &ModelParams, adapters: Option<&AdapterSet>, term: TermKind, seqs: &[TokenSequence], into: &mut Gradients) -> Result<f64> {
    if seqs.is_empty() {
        return param_err("empty batch");
    }
    let scale = 1.0 / seqs.len() as f64;
    let parts: Vec<Result<(f64, Gradients)>> = seqs
        .par_iter()
        .map(|s| sequence_grads(params, adapters, term, s, scale))
        .collect();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (name, m) in g {
            into.get_mut(&name).expect("same trainable set").axpy(1.0, &m)?;
        }
    }
    Ok(loss * scale)
}

/// Loss breakdown and gradients of the trainable tensors: every parameter
/// without adapters, only the adapter `lora_a`/`lora_b` factors with them.
pub fn grads(params: &ModelParams, adapters: Option<&AdapterSet>, objective: ObjectiveSpec, batch: Batch<'_>) -> Result<(LossBreakdown, Gradients)> {
    objective.validate()?;
    let mut g = zero_grads(params, adapters);
    let forget_term = batch_term(params, adapters, objective.kind.forget_term(), batch.forget, &mut g)?;
    let retain_term = match (objective.uses_retain, batch.retain) {
        (true, Some(r)) => batch_term(params, adapters, TermKind::Nll, r, &mut g)?,
        (true, None) => return param_err(format!("objective {} needs a retain batch", objective.kind.name())),
        (false, _) => 0.0,
    };
    let total = forget_term + retain_term;
    if !total.is_finite() {
        return Err(UlabError::NonFinite {
            tensor: first_non_finite(params, adapters).unwrap_or_else(|| "loss".into()),
        });
    }
    if let Some((name, _)) = g.iter().find(|(_, m)| !m.is_finite()) {
        return Err(UlabError::NonFinite { tensor: name.clone() });
    }
    Ok((
        LossBreakdown {
            total,
            forget_term,
            retain_term,
        },
        g,
    ))
}
