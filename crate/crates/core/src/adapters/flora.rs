use std::collections::BTreeMap;

use super::{AdapterInit, AdapterSet, AdapterSpec, LoraAdapter};
use crate::error::{param_err, shape_err, Result, UlabError};
use crate::model::ModelParams;
use crate::numerics::{matmul, row_sums, svd, truncate, Matrix};

/// Lower bound on the row weights so the weighting stays invertible.
pub const DEFAULT_ROW_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FloraFactors {
    pub a_star: Matrix,
    pub b_star: Matrix,
    pub w_star: Matrix,
}

/// Row-weighted rank-`r` approximation of `w`.
///
/// With `d_i = max(sqrt(sum_j f_rel[i, j]), floor)` and `D = diag(d)`, the
/// pair `B* = D^-1 U S^1/2`, `A* = S^1/2 V^T` built from the rank-`r`
/// truncated SVD of `D W` minimizes `||D (W - B A)||_F`. The compensated
/// base weight is `W* = W - B* A*`.
pub fn flora_init(w: &Matrix, f_rel: &Matrix, r: usize, floor: f64) -> Result<FloraFactors> {
    if !(floor > 0.0) {
        return param_err(format!("row floor must be positive, got {floor}"));
    }
    if w.shape() != f_rel.shape() {
        return shape_err(format!(
            "importance {:?} does not match weight {:?}",
            f_rel.shape(),
            w.shape()
        ));
    }
    if r == 0 || r > w.rows().min(w.cols()) {
        return shape_err(format!("rank {r} outside 1..={}", w.rows().min(w.cols())));
    }
    if f_rel.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(UlabError::Numerical("relative fisher must be finite and non-negative".into()));
    }

    let d: Vec<f64> = row_sums(f_rel).into_iter().map(|s| s.sqrt().max(floor)).collect();
    let dw = Matrix::from_fn(w.rows(), w.cols(), |i, j| d[i] * w[(i, j)]);
    let f = truncate(&svd(&dw)?, r)?;
    let root: Vec<f64> = f.s.iter().map(|s| s.sqrt()).collect();

    let b_star = Matrix::from_fn(w.rows(), r, |i, j| f.u[(i, j)] * root[j] / d[i]);
    let a_star = Matrix::from_fn(r, w.cols(), |i, j| root[i] * f.vt[(i, j)]);
    let w_star = w.sub(&matmul(&b_star, &a_star)?)?;
    Ok(FloraFactors { a_star, b_star, w_star })
}

/// Attaches Fisher-weighted adapters and replaces each targeted base weight
/// in `params` by its compensated form, so the model's outputs are unchanged.
pub fn attach_flora(params: &mut ModelParams, spec: &AdapterSpec, f_rel: &BTreeMap<String, Matrix>, floor: f64) -> Result<AdapterSet> {
    if spec.init != AdapterInit::Flora {
        return param_err("attach_flora needs a spec with flora init");
    }
    spec.validate(params)?;
    let mut set = AdapterSet::new();
    let mut compensated = Vec::new();
    for name in spec.tensor_names(params.config.n_layers) {
        let importance = f_rel
            .get(&name)
            .ok_or_else(|| UlabError::Shape(format!("no relative fisher for `{name}`")))?;
        let w = params.get(&name).expect("validated");
        let FloraFactors { a_star, b_star, w_star } = flora_init(w, importance, spec.rank, floor)?;
        set.insert(LoraAdapter {
            target_name: name.clone(),
            a: a_star,
            b: b_star,
        })?;
        compensated.push((name, w_star));
    }
    for (name, w_star) in compensated {
        params.set(&name, w_star)?;
        set.mark_compensated(&name);
    }
    Ok(set)
}
