//! Unlearning and retention losses.
//!
//! Every loss here is written for minimization. `lm_loss` is the mean
//! next-token negative log-likelihood, `ga_loss` its negation (descending it
//! ascends the cross-entropy), and `ihl_loss` the inverted hinge
//! `max(0, 1 + p_true - p_runner_up)` averaged over positions. Logit row `t`
//! scores the token at position `t + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result, UlabError};
use crate::numerics::{log_sum_exp, softmax_into, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Language modeling (retention / pretraining).
    Lm,
    /// Gradient ascent on the forget set.
    Ga,
    /// Gradient difference: GA on forget plus LM on retain.
    Gd,
    /// Inverted hinge on the forget set.
    Ihl,
    /// Inverted hinge on forget plus LM on retain.
    IhlRetain,
}

impl ObjectiveKind {
    pub fn uses_retain(self) -> bool {
        matches!(self, ObjectiveKind::Gd | ObjectiveKind::IhlRetain)
    }

    /// Per-sequence term applied to the main (forget) batch.
    pub fn forget_term(self) -> TermKind {
        match self {
            ObjectiveKind::Lm => TermKind::Nll,
            ObjectiveKind::Ga | ObjectiveKind::Gd => TermKind::NegNll,
            ObjectiveKind::Ihl | ObjectiveKind::IhlRetain => TermKind::Hinge,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Lm => "lm",
            ObjectiveKind::Ga => "ga",
            ObjectiveKind::Gd => "gd",
            ObjectiveKind::Ihl => "ihl",
            ObjectiveKind::IhlRetain => "ihl-retain",
        }
    }

    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Lm,
        ObjectiveKind::Ga,
        ObjectiveKind::Gd,
        ObjectiveKind::Ihl,
        ObjectiveKind::IhlRetain,
    ];
}

impl std::str::FromStr for ObjectiveKind {
    type Err = UlabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "lm" => ObjectiveKind::Lm,
            "ga" => ObjectiveKind::Ga,
            "gd" => ObjectiveKind::Gd,
            "ihl" => ObjectiveKind::Ihl,
            "ihl-retain" | "ihl_retain" => ObjectiveKind::IhlRetain,
            other => return param_err(format!("unknown objective `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub uses_retain: bool,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            uses_retain: kind.uses_retain(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_retain != self.kind.uses_retain() {
            return param_err(format!(
                "objective {} has uses_retain={} but requires {}",
                self.kind.name(),
                self.uses_retain,
                self.kind.uses_retain()
            ));
        }
        Ok(())
    }
}

impl From<ObjectiveKind> for ObjectiveSpec {
    fn from(kind: ObjectiveKind) -> Self {
        Self::new(kind)
    }
}

/// The per-sequence loss shapes the objectives are assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermKind {
    Nll,
    NegNll,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub forget_term: f64,
    pub retain_term: f64,
}

fn check_alignment(logits: &Matrix, x: &[u32]) -> Result<usize> {
    let t = x.len();
    if t < 2 {
        return shape_err(format!("sequence of length {t} has no next-token targets"));
    }
    if logits.rows() != t && logits.rows() != t - 1 {
        return shape_err(format!(
            "{} logit rows do not align with a {t}-token sequence",
            logits.rows()
        ));
    }
    if let Some(&bad) = x.iter().find(|&&v| v as usize >= logits.cols()) {
        return shape_err(format!("token {bad} outside vocabulary of {}", logits.cols()));
    }
    Ok(t - 1)
}

/// Mean over positions of `-log p(x_{t+1} | x_{..=t})`.
pub fn lm_loss(logits: &Matrix, x: &[u32]) -> Result<f64> {
    let n = check_alignment(logits, x)?;
    let mut total = 0.0;
    for t in 0..n {
        let row = logits.row(t);
        total += log_sum_exp(row) - row[x[t + 1] as usize];
    }
    Ok(total / n as f64)
}

pub fn ga_loss(logits: &Matrix, x: &[u32]) -> Result<f64> {
    Ok(-lm_loss(logits, x)?)
}

/// Runner-up token: argmax over `v != true_idx`, lowest id on ties.
#[inline]
pub fn runner_up(probs: &[f64], true_idx: usize) -> usize {
    let mut best = usize::MAX;
    for (v, &p) in probs.iter().enumerate() {
        if v == true_idx {
            continue;
        }
        if best == usize::MAX || p > probs[best] {
            best = v;
        }
    }
    best
}

/// Per-token inverted hinge value `max(0, 1 + p_t - p*)`.
pub fn ihl_token(probs: &[f64], true_idx: usize) -> f64 {
    let star = runner_up(probs, true_idx);
    (1.0 + probs[true_idx] - probs[star]).max(0.0)
}

/// Mean over positions of the per-token inverted hinge.
pub fn ihl_loss(logits: &Matrix, x: &[u32]) -> Result<f64> {
    let n = check_alignment(logits, x)?;
    if logits.cols() < 2 {
        return param_err("inverted hinge needs a vocabulary of at least 2");
    }
    let mut probs = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for t in 0..n {
        softmax_into(logits.row(t), &mut probs);
        total += ihl_token(&probs, x[t + 1] as usize);
    }
    Ok(total / n as f64)
}

fn check_probs(probs: &[f64], true_idx: usize) -> Result<()> {
    if probs.len() < 2 {
        return param_err("probability vector needs at least 2 entries");
    }
    if true_idx >= probs.len() {
        return param_err(format!("true index {true_idx} out of range {}", probs.len()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return param_err("probability entries must lie in [0, 1]");
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return param_err(format!("probabilities sum to {sum}"));
    }
    Ok(())
}

/// Gradient of the per-token inverted hinge with respect to the logits, by
/// the three-case closed form; the zero vector once the hinge is inactive.
pub fn ihl_logit_grad(probs: &[f64], true_idx: usize) -> Result<Vec<f64>> {
    check_probs(probs, true_idx)?;
    let mut g = vec![0.0; probs.len()];
    ihl_grad_into(probs, true_idx, 1.0, &mut g);
    Ok(g)
}

/// Accumulates `scale * dIHL/dlogits` into `out`.
#[inline]
pub(crate) fn ihl_grad_into(probs: &[f64], true_idx: usize, scale: f64, out: &mut [f64]) {
    let star = runner_up(probs, true_idx);
    let pt = probs[true_idx];
    let ps = probs[star];
    if 1.0 + pt - ps <= 0.0 {
        return;
    }
    let diff = ps - pt;
    for (v, (o, &pv)) in out.iter_mut().zip(probs).enumerate() {
        *o += scale
            * if v == true_idx {
                pt * (diff + 1.0)
            } else if v == star {
                ps * (diff - 1.0)
            } else {
                pv * diff
            };
    }
}

/// Gradient of the per-token `ga_loss` (`+log p_t`) with respect to the logits.
pub fn ga_logit_grad(probs: &[f64], true_idx: usize) -> Result<Vec<f64>> {
    check_probs(probs, true_idx)?;
    let mut g = vec![0.0; probs.len()];
    nll_grad_into(probs, true_idx, -1.0, &mut g);
    Ok(g)
}

/// Accumulates `scale * dNLL/dlogits = scale * (p - onehot)` into `out`.
#[inline]
pub(crate) fn nll_grad_into(probs: &[f64], true_idx: usize, scale: f64, out: &mut [f64]) {
    for (o, &p) in out.iter_mut().zip(probs) {
        *o += scale * p;
    }
    out[true_idx] -= scale;
}

/// Loss of one sequence under `term` and its gradient with respect to the
/// logits, scaled by `scale` (used for batch averaging).
pub(crate) fn sequence_term(term: TermKind, logits: &Matrix, x: &[u32], scale: f64) -> Result<(f64, Matrix)> {
    let n = check_alignment(logits, x)?;
    let v = logits.cols();
    if term == TermKind::Hinge && v < 2 {
        return param_err("inverted hinge needs a vocabulary of at least 2");
    }
    let mut grad = Matrix::zeros(logits.rows(), v);
    let mut probs = vec![0.0; v];
    let per_token = scale / n as f64;
    let mut total = 0.0;
    for t in 0..n {
        let row = logits.row(t);
        let target = x[t + 1] as usize;
        softmax_into(row, &mut probs);
        let g = grad.row_mut(t);
        match term {
            TermKind::Nll => {
                total += log_sum_exp(row) - row[target];
                nll_grad_into(&probs, target, per_token, g);
            }
            TermKind::NegNll => {
                total -= log_sum_exp(row) - row[target];
                nll_grad_into(&probs, target, -per_token, g);
            }
            TermKind::Hinge => {
                total += ihl_token(&probs, target);
                ihl_grad_into(&probs, target, per_token, g);
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// Scored sequence: logits for `tokens` as produced by a forward pass.
pub type Scored<'a> = (&'a Matrix, &'a [u32]);

fn batch_mean(term: TermKind, batch: &[Scored<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return param_err("empty batch");
    }
    let mut total = 0.0;
    for (logits, x) in batch {
        total += match term {
            TermKind::Nll => lm_loss(logits, x)?,
            TermKind::NegNll => ga_loss(logits, x)?,
            TermKind::Hinge => ihl_loss(logits, x)?,
        };
    }
    Ok(total / batch.len() as f64)
}

/// The full objective over a forget batch and optional retain batch, each term
/// averaged over its sequences.
pub fn combined_loss(spec: ObjectiveSpec, forget: &[Scored<'_>], retain: Option<&[Scored<'_>]>) -> Result<LossBreakdown> {
    spec.validate()?;
    let forget_term = batch_mean(spec.kind.forget_term(), forget)?;
    let retain_term = match (spec.uses_retain, retain) {
        (true, Some(r)) => batch_mean(TermKind::Nll, r)?,
        (true, None) => return param_err(format!("objective {} needs a retain batch", spec.kind.name())),
        (false, _) => 0.0,
    };
    Ok(LossBreakdown {
        total: forget_term + retain_term,
        forget_term,
        retain_term,
    })
}
