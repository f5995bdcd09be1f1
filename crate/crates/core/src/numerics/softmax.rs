use crate::error::{Result, UlabError};

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(UlabError::Shape("empty logit vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(UlabError::Numerical("non-finite logit".into()));
    }
    Ok(())
}

#[inline]
fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Max-subtracted softmax.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Unchecked in-place kernel used on hot paths whose inputs are already finite.
#[inline]
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = max_of(logits);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// `log(softmax(logits))` computed as `l - max - log(sum(exp(l - max)))`.
pub fn log_softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|l| l - lse).collect())
}

#[inline]
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = max_of(logits);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Index of the largest entry, ties resolved toward the lowest index.
#[inline]
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
