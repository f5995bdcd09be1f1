//! Dense linear algebra and numerically stable probability kernels.

mod matrix;
mod softmax;
mod svd;

pub use matrix::{gemm, matmul, matmul_nt, matmul_tn, row_sums, Matrix, Trans};
pub use softmax::{argmax, log_softmax_row, softmax_row};
pub(crate) use softmax::{log_sum_exp, softmax_into};
pub use svd::{svd, truncate, SvdFactors, SVD_MAX_SWEEPS, SVD_TOL};
