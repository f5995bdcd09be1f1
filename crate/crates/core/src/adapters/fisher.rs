use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::model::{grads, Batch, ModelParams, TokenSequence};
use crate::numerics::Matrix;
use crate::objectives::{ObjectiveKind, ObjectiveSpec};

/// Denominator regularizer for the forget/retain Fisher ratio.
pub const DEFAULT_FISHER_EPS: f64 = 1e-8;

/// Accumulated entrywise squared per-sequence gradients. The estimate is
/// `sums / n_examples`; two estimates merge by adding sums and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherEstimate {
    pub sums: BTreeMap<String, Matrix>,
    pub n_examples: usize,
}

impl FisherEstimate {
    pub fn merge(&self, other: &FisherEstimate) -> Result<FisherEstimate> {
        if self.sums.len() != other.sums.len() {
            return shape_err("fisher estimates cover different tensors");
        }
        let mut sums = BTreeMap::new();
        for (name, m) in &self.sums {
            let o = other
                .sums
                .get(name)
                .ok_or_else(|| crate::UlabError::Shape(format!("`{name}` missing from other estimate")))?;
            sums.insert(name.clone(), m.add(o)?);
        }
        Ok(FisherEstimate {
            sums,
            n_examples: self.n_examples + other.n_examples,
        })
    }

    /// Averaged estimate for one tensor.
    pub fn mean(&self, name: &str) -> Option<Matrix> {
        let n = self.n_examples.max(1) as f64;
        self.sums.get(name).map(|m| m.scale(1.0 / n))
    }

    pub fn means(&self) -> BTreeMap<String, Matrix> {
        self.sums.keys().map(|n| (n.clone(), self.mean(n).expect("key exists"))).collect()
    }
}

/// Empirical Fisher of every parameter over `corpus`: the average over
/// sequences of the squared gradient of the sequence's summed next-token NLL.
pub fn estimate_fisher(params: &ModelParams, corpus: &[TokenSequence]) -> Result<FisherEstimate> {
    if corpus.is_empty() {
        return param_err("fisher estimation needs a non-empty corpus");
    }
    let lm = ObjectiveSpec::new(ObjectiveKind::Lm);
    let per_seq: Vec<Result<BTreeMap<String, Matrix>>> = corpus
        .par_iter()
        .map(|x| {
            let (_, g) = grads(params, None, lm, Batch::new(std::slice::from_ref(x)))?;
            // grads() averages over positions; undo that to get the summed loss
            let positions = (x.len() - 1) as f64;
            Ok(g.into_iter()
                .map(|(n, m)| (n, m.map(|v| (v * positions) * (v * positions))))
                .collect())
        })
        .collect();
    let mut sums: Option<BTreeMap<String, Matrix>> = None;
    for part in per_seq {
        let part = part?;
        match sums.as_mut() {
            None => sums = Some(part),
            Some(acc) => {
                for (n, m) in part {
                    acc.get_mut(&n).expect("same parameter set").axpy(1.0, &m)?;
                }
            }
        }
    }
    Ok(FisherEstimate {
        sums: sums.expect("corpus is non-empty"),
        n_examples: corpus.len(),
    })
}

/// Entrywise `F_forget / (F_retain + eps)` over the tensors both estimates share.
pub fn relative_fisher(f_forget: &FisherEstimate, f_retain: &FisherEstimate, eps: f64) -> Result<BTreeMap<String, Matrix>> {
    if !(eps > 0.0) {
        return param_err(format!("fisher epsilon must be positive, got {eps}"));
    }
    let mut out = BTreeMap::new();
    for name in f_forget.sums.keys() {
        let ff = f_forget.mean(name).expect("key exists");
        let fr = f_retain
            .mean(name)
            .ok_or_else(|| crate::UlabError::Shape(format!("`{name}` missing from retain fisher")))?;
        out.insert(name.clone(), ff.zip_with(&fr, |f, r| f / (r + eps))?);
    }
    if out.len() != f_retain.sums.len() {
        return shape_err("forget and retain fisher cover different tensors");
    }
    Ok(out)
}
