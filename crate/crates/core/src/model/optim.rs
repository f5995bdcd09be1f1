use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, ModelParams, Precision};
use crate::adapters::AdapterSet;
use crate::error::{param_err, Result};
use crate::numerics::Matrix;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments keyed by trainable tensor name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub steps: u64,
    pub precision: Precision,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl AdamState {
    pub fn new(precision: Precision) -> Self {
        Self {
            steps: 0,
            precision,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

fn trainable_names(params: &ModelParams, adapters: Option<&AdapterSet>) -> Vec<String> {
    match adapters {
        Some(ad) => ad
            .iter()
            .flat_map(|(n, _)| [format!("{n}.lora_a"), format!("{n}.lora_b")])
            .collect(),
        None => params.names().map(str::to_string).collect(),
    }
}

/// One Adam update of the trainable tensors: the adapter factors when
/// `adapters` is given (base weights untouched), otherwise every parameter.
pub fn step(params: &mut ModelParams, adapters: Option<&mut AdapterSet>, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return param_err(format!("learning rate must be positive, got {lr}"));
    }
    let expected = trainable_names(params, adapters.as_deref());
    if expected.len() != grads.len() || expected.iter().any(|n| !grads.contains_key(n)) {
        let extra: Vec<_> = grads.keys().filter(|k| !expected.contains(k)).take(3).collect();
        return param_err(format!(
            "gradient names do not match trainable tensors ({} expected, {} given; unexpected: {extra:?})",
            expected.len(),
            grads.len()
        ));
    }

    state.steps += 1;
    let t = state.steps as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let precision = state.precision;

    let mut adapters = adapters;
    for (name, g) in grads {
        let target: &mut Matrix = match adapters.as_deref_mut() {
            Some(ad) => ad.factor_mut(name).expect("validated above"),
            None => params.get_mut(name).expect("validated above"),
        };
        if target.shape() != g.shape() {
            return param_err(format!("gradient for `{name}` has the wrong shape"));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
        for (((w, &gi), mi), vi) in target
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        precision.round(target);
    }
    Ok(())
}
