//! Memorization and quality measures.
//!
//! Conventions, with `T = x.len()` and 0-based indices:
//! - `el_n` cuts the sequence after `t` tokens for `t = 1..=T-n`, greedily
//!   decodes `T - t` tokens from `x[..t]` and scores the overlap of the
//!   generation's n-grams with those of the true suffix `x[t..]`.
//! - `ma` checks the argmax of logit row `t` against `x[t+1]` for the `T-1`
//!   predicted positions.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{param_err, Result};
use crate::model::{forward, greedy_continuations, ModelParams, TokenSequence};
use crate::numerics::{argmax, log_softmax_row, Matrix};

/// Anything that maps a token prefix to next-token logits.
pub trait Predictor: Sync {
    /// Logits of shape `x.len() x V`; row `t` scores the token after `x[..=t]`.
    fn logits(&self, x: &[u32]) -> Result<Matrix>;

    /// Greedy continuation of `prefix` by `n_new` tokens.
    fn continuation(&self, prefix: &[u32], n_new: usize) -> Result<Vec<u32>> {
        let mut out = prefix.to_vec();
        for _ in 0..n_new {
            let l = self.logits(&out)?;
            out.push(argmax(l.row(out.len() - 1)) as u32);
        }
        Ok(out.split_off(prefix.len()))
    }

    /// Continuations of `x[..c]` by `x.len() - c` tokens for each cut `c`.
    fn continuations(&self, x: &[u32], cuts: &[usize]) -> Result<Vec<Vec<u32>>> {
        cuts.iter().map(|&c| self.continuation(&x[..c], x.len() - c)).collect()
    }
}

/// A transformer with optional adapters.
#[derive(Debug, Clone, Copy)]
pub struct LanguageModel<'a> {
    pub params: &'a ModelParams,
    pub adapters: Option<&'a AdapterSet>,
}

impl<'a> LanguageModel<'a> {
    pub fn new(params: &'a ModelParams, adapters: Option<&'a AdapterSet>) -> Self {
        Self { params, adapters }
    }
}

impl Predictor for LanguageModel<'_> {
    fn logits(&self, x: &[u32]) -> Result<Matrix> {
        forward(self.params, self.adapters, x)
    }

    fn continuations(&self, x: &[u32], cuts: &[usize]) -> Result<Vec<Vec<u32>>> {
        greedy_continuations(self.params, self.adapters, x, cuts)
    }
}

/// Fraction of the positional n-grams of `a` that occur anywhere in `b`.
/// Zero when `a` has fewer than `n` tokens.
pub fn ngram_overlap(a: &[u32], b: &[u32], n: usize) -> f64 {
    if n == 0 || a.len() < n {
        return 0.0;
    }
    let present: HashSet<&[u32]> = b.windows(n).collect();
    let total = a.len() - n + 1;
    let hits = a.windows(n).filter(|g| present.contains(g)).count();
    hits as f64 / total as f64
}

/// Extraction likelihood of `x` at order `n`.
pub fn el_n(model: &dyn Predictor, x: &[u32], n: usize) -> Result<f64> {
    if n == 0 {
        return param_err("n-gram order must be positive");
    }
    if x.len() < n + 1 {
        return param_err(format!("sequence of length {} is too short for n = {n}", x.len()));
    }
    let cuts: Vec<usize> = (1..=x.len() - n).collect();
    let gens = model.continuations(x, &cuts)?;
    let total: f64 = cuts
        .iter()
        .zip(&gens)
        .map(|(&t, g)| ngram_overlap(g, &x[t..], n))
        .sum();
    Ok(total / cuts.len() as f64)
}

/// Memorization accuracy: share of positions whose argmax is the next token.
pub fn ma(model: &dyn Predictor, x: &[u32]) -> Result<f64> {
    if x.len() < 2 {
        return param_err("memorization accuracy needs at least 2 tokens");
    }
    let logits = model.logits(x)?;
    let hits = (0..x.len() - 1)
        .filter(|&t| argmax(logits.row(t)) == x[t + 1] as usize)
        .count();
    Ok(hits as f64 / (x.len() - 1) as f64)
}

/// `exp` of the token-weighted mean next-token NLL over `corpus`.
pub fn perplexity(model: &dyn Predictor, corpus: &[TokenSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return param_err("perplexity needs a non-empty corpus");
    }
    let parts: Vec<Result<(f64, usize)>> = corpus
        .par_iter()
        .map(|x| {
            let logits = model.logits(x)?;
            let mut s = 0.0;
            for t in 0..x.len() - 1 {
                s -= log_softmax_row(logits.row(t))?[x[t + 1] as usize];
            }
            Ok((s, x.len() - 1))
        })
        .collect();
    let (mut nll, mut count) = (0.0, 0usize);
    for p in parts {
        let (s, c) = p?;
        nll += s;
        count += c;
    }
    Ok((nll / count as f64).exp())
}

/// Corpus means of EL_n and MA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n: usize,
    pub el_n: f64,
    pub ma: f64,
}

pub fn corpus_stats(model: &dyn Predictor, corpus: &[TokenSequence], n: usize) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return param_err("corpus statistics need a non-empty corpus");
    }
    let per: Vec<Result<(f64, f64)>> = corpus
        .par_iter()
        .map(|x| Ok((el_n(model, x, n)?, ma(model, x)?)))
        .collect();
    let (mut el, mut m) = (0.0, 0.0);
    for p in per {
        let (e, a) = p?;
        el += e;
        m += a;
    }
    let k = corpus.len() as f64;
    Ok(CorpusStats { n, el_n: el / k, ma: m / k })
}

/// Unlearning succeeded once both forget-set means are at or below the
/// validation means.
pub fn stopping_criterion(forget: &CorpusStats, val: &CorpusStats) -> Result<bool> {
    if forget.n != val.n {
        return param_err(format!("n-gram orders differ: forget {} vs validation {}", forget.n, val.n));
    }
    Ok(forget.el_n <= val.el_n && forget.ma <= val.ma)
}

/// One evaluation row of an unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub epoch: usize,
    pub n: usize,
    pub el_n: f64,
    pub ma: f64,
    pub ppl_retain: f64,
    pub ppl_heldout: f64,
    pub el_threshold: f64,
    pub ma_threshold: f64,
    pub unlearned: bool,
}

impl MetricReport {
    pub fn new(epoch: usize, forget: CorpusStats, val: &CorpusStats, ppl_retain: f64, ppl_heldout: f64) -> Result<Self> {
        let unlearned = stopping_criterion(&forget, val)?;
        Ok(Self {
            epoch,
            n: forget.n,
            el_n: forget.el_n,
            ma: forget.ma,
            ppl_retain,
            ppl_heldout,
            el_threshold: val.el_n,
            ma_threshold: val.ma,
            unlearned,
        })
    }
}
