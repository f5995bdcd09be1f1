//! Greedy decoding.
//!
//! [`generate_greedy`] re-runs the full forward pass per emitted token. The
//! extraction metric needs a continuation from every prefix cut of a sequence,
//! which [`greedy_continuations`] serves in one batch: the keys and values of
//! the true prefix come from a single forward pass over the whole sequence
//! (causality makes every prefix's state a truncation of it), each cut then
//! only processes its own generated tokens, and cuts whose continuation is a
//! suffix of an earlier cut's continuation are derived instead of decoded.

use super::transformer::{adapter_for, forward, forward_cached, gelu, layer_norm, linear};
use super::ModelParams;
use crate::adapters::AdapterSet;
use crate::error::{shape_err, Result};
use crate::numerics::{argmax, matmul_nt, softmax_into, Matrix};

/// Appends `n_new` argmax tokens to `prefix` (lowest id wins ties).
pub fn generate_greedy(params: &ModelParams, adapters: Option<&AdapterSet>, prefix: &[u32], n_new: usize) -> Result<Vec<u32>> {
    let cfg = &params.config;
    if prefix.is_empty() {
        return shape_err("greedy decoding needs a non-empty prefix");
    }
    if prefix.len() + n_new > cfg.max_seq {
        return shape_err(format!(
            "prefix {} + {n_new} new tokens exceeds max_seq {}",
            prefix.len(),
            cfg.max_seq
        ));
    }
    let mut out = prefix.to_vec();
    for _ in 0..n_new {
        let logits = forward(params, adapters, &out)?;
        out.push(argmax(logits.row(out.len() - 1)) as u32);
    }
    Ok(out)
}

/// Per-cut decoding state.
struct Root {
    cut: usize,
    need: usize,
    generated: Vec<u32>,
    /// per layer, keys and values of this cut's own generated tokens
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Greedy continuations of `x` from each prefix length in `cuts`; the
/// continuation for cut `c` has `x.len() - c` tokens.
pub fn greedy_continuations(params: &ModelParams, adapters: Option<&AdapterSet>, x: &[u32], cuts: &[usize]) -> Result<Vec<Vec<u32>>> {
    let t_len = x.len();
    if let Some(&c) = cuts.iter().find(|&&c| c == 0 || c >= t_len) {
        return shape_err(format!("cut {c} outside 1..{t_len}"));
    }
    if cuts.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &params.config;
    let (logits, cache) = forward_cached(params, adapters, x)?;
    let first: Vec<u32> = (0..t_len).map(|t| argmax(logits.row(t)) as u32).collect();

    // Cut c continues cut c-1 when the latter's first token is x[c-1].
    let mut sorted: Vec<usize> = cuts.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut root_of = std::collections::BTreeMap::new();
    let mut roots: Vec<Root> = Vec::new();
    let mut prev: Option<usize> = None;
    for &c in &sorted {
        let derived = match prev {
            Some(p) if p + 1 == c && first[p - 1] == x[p] => Some(root_of[&p]),
            _ => None,
        };
        let r = match derived {
            Some(r) => r,
            None => {
                roots.push(Root {
                    cut: c,
                    need: t_len - c,
                    generated: vec![first[c - 1]],
                    keys: vec![Vec::new(); cfg.n_layers],
                    values: vec![Vec::new(); cfg.n_layers],
                });
                roots.len() - 1
            }
        };
        root_of.insert(c, r);
        prev = Some(c);
    }

    decode_roots(params, adapters, &cache, &mut roots)?;

    Ok(cuts
        .iter()
        .map(|c| {
            let root = &roots[root_of[c]];
            root.generated[c - root.cut..].to_vec()
        })
        .collect())
}

fn decode_roots(params: &ModelParams, adapters: Option<&AdapterSet>, cache: &super::transformer::ForwardCache, roots: &mut [Root]) -> Result<()> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let tok = params.t("emb.tok");
    let pos = params.t("emb.pos");
    loop {
        let active: Vec<usize> = (0..roots.len()).filter(|&i| roots[i].generated.len() < roots[i].need).collect();
        if active.is_empty() {
            return Ok(());
        }
        let b = active.len();
        let mut h = Matrix::zeros(b, d);
        for (row, &ri) in active.iter().enumerate() {
            let r = &roots[ri];
            let token = *r.generated.last().expect("roots start with one token") as usize;
            let p = r.cut + r.generated.len() - 1;
            for ((o, a), e) in h.row_mut(row).iter_mut().zip(tok.row(token)).zip(pos.row(p)) {
                *o = a + e;
            }
        }
        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("blk{l}.{s}");
            let (a1, _) = layer_norm(&h, params.t(&name("ln1.gain")), params.t(&name("ln1.bias")));
            let (q, _) = linear(&a1, params.t(&name("q")), adapter_for(adapters, &name("q")));
            let (k, _) = linear(&a1, params.t(&name("k")), adapter_for(adapters, &name("k")));
            let (v, _) = linear(&a1, params.t(&name("v")), adapter_for(adapters, &name("v")));
            let true_k = &cache.layers[l].k;
            let true_v = &cache.layers[l].v;
            let mut ctx = Matrix::zeros(b, d);
            for (row, &ri) in active.iter().enumerate() {
                let r = &mut roots[ri];
                r.keys[l].extend_from_slice(k.row(row));
                r.values[l].extend_from_slice(v.row(row));
                let n_own = r.keys[l].len() / d;
                let n_keys = r.cut + n_own;
                let mut scores = vec![0.0; n_keys];
                let mut probs = vec![0.0; n_keys];
                for hd in 0..cfg.n_heads {
                    let off = hd * dh;
                    let qi = &q.row(row)[off..off + dh];
                    for j in 0..n_keys {
                        let kj = if j < r.cut {
                            &true_k.row(j)[off..off + dh]
                        } else {
                            let s = (j - r.cut) * d + off;
                            &r.keys[l][s..s + dh]
                        };
                        scores[j] = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    softmax_into(&scores, &mut probs);
                    let cr = &mut ctx.row_mut(row)[off..off + dh];
                    for (j, &p) in probs.iter().enumerate() {
                        let vj = if j < r.cut {
                            &true_v.row(j)[off..off + dh]
                        } else {
                            let s = (j - r.cut) * d + off;
                            &r.values[l][s..s + dh]
                        };
                        for (c, &vv) in cr.iter_mut().zip(vj) {
                            *c += p * vv;
                        }
                    }
                }
            }
            let (att, _) = linear(&ctx, params.t(&name("o")), adapter_for(adapters, &name("o")));
            h.axpy(1.0, &att)?;
            let (a2, _) = layer_norm(&h, params.t(&name("ln2.gain")), params.t(&name("ln2.bias")));
            let (pre, _) = linear(&a2, params.t(&name("ffn.in")), adapter_for(adapters, &name("ffn.in")));
            let act = pre.map(gelu);
            let (ff, _) = linear(&act, params.t(&name("ffn.out")), adapter_for(adapters, &name("ffn.out")));
            h.axpy(1.0, &ff)?;
        }
        let (hf, _) = layer_norm(&h, params.t("final_ln.gain"), params.t("final_ln.bias"));
        let logits = matmul_nt(&hf, params.t("head"))?;
        for (row, &ri) in active.iter().enumerate() {
            roots[ri].generated.push(argmax(logits.row(row)) as u32);
        }
    }
}
