//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! The input is copied column-wise and pairs of columns are rotated until every
//! pair is orthogonal to within [`SVD_TOL`] relative to the product of their
//! norms. Singular values are the final column norms, `V` accumulates the
//! rotations, and `U` is the normalized columns. Wide inputs are handled by
//! decomposing the transpose.

use serde::{Deserialize, Serialize};

use super::matrix::{matmul, Matrix};
use crate::error::{shape_err, Result, UlabError};

/// Relative off-diagonal threshold for a column pair to count as orthogonal.
pub const SVD_TOL: f64 = 1e-12;
/// Sweep cap before reporting non-convergence.
pub const SVD_MAX_SWEEPS: usize = 100;

/// `m = u · diag(s) · vt` with `s` sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · vt`
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (v, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *v *= s;
            }
        }
        matmul(&us, &self.vt).expect("factor shapes agree by construction")
    }
}

/// Thin SVD of `m`.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if !m.is_finite() {
        return Err(UlabError::Numerical("svd input has non-finite entries".into()));
    }
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose())?;
        let mut f = SvdFactors {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        };
        normalize_signs(&mut f);
        return Ok(f);
    }
    let mut f = svd_tall(m)?;
    normalize_signs(&mut f);
    Ok(f)
}

/// Keeps the leading `r` singular triplets.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<SvdFactors> {
    if r == 0 || r > f.s.len() {
        return shape_err(format!("truncation rank {r} outside 1..={}", f.s.len()));
    }
    Ok(SvdFactors {
        u: f.u.slice_cols(0, r),
        s: f.s[..r].to_vec(),
        vt: f.vt.slice_rows(0, r),
    })
}

fn svd_tall(a: &Matrix) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    // column-major working copies
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let fro = a.frobenius_norm();
    // columns below this norm are numerically null; their direction is noise
    let null_norm = fro * 1e-14;
    let null_sq = null_norm * null_norm;

    let mut converged = n < 2 || fro == 0.0;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == SVD_MAX_SWEEPS {
            return Err(UlabError::SvdNoConvergence { sweeps, residual });
        }
        sweeps += 1;
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = col_products(&g[p], &g[q]);
                if alpha <= null_sq || beta <= null_sq || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOL * 1e-2 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = residual <= SVD_TOL;
    }

    let norms: Vec<f64> = g.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vt = Matrix::zeros(n, n);
    let mut pending_null = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        vt.row_mut(k).copy_from_slice(&v[j]);
        if norms[j] > null_norm && norms[j] > 0.0 {
            u_cols.push(g[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(Vec::new());
            pending_null.push(k);
        }
    }
    complete_basis(&mut u_cols, &pending_null, m);

    let u = Matrix::from_fn(m, n, |i, k| u_cols[k][i]);
    Ok(SvdFactors { u, s, vt })
}

#[inline]
fn col_products(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    let mut g = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        a += xi * xi;
        b += yi * yi;
        g += xi * yi;
    }
    (a, b, g)
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the left singular vectors of null columns with unit vectors
/// orthogonal to every other column (Gram-Schmidt over the standard basis).
fn complete_basis(u_cols: &mut [Vec<f64>], pending: &[usize], m: usize) {
    let mut next_basis = 0;
    for &k in pending {
        loop {
            assert!(next_basis < m, "standard basis exhausted while completing U");
            let mut cand = vec![0.0; m];
            cand[next_basis] = 1.0;
            next_basis += 1;
            // two passes of classical Gram-Schmidt
            for _ in 0..2 {
                for other in u_cols.iter() {
                    if other.is_empty() {
                        continue;
                    }
                    let d: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= d * o;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                u_cols[k] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Makes the largest-magnitude entry of each `u` column positive, flipping the
/// matching `vt` row.
fn normalize_signs(f: &mut SvdFactors) {
    for k in 0..f.s.len() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..f.u.rows() {
            let x = f.u[(i, k)];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..f.u.rows() {
                f.u[(i, k)] = -f.u[(i, k)];
            }
            for x in f.vt.row_mut(k) {
                *x = -*x;
            }
        }
    }
}
