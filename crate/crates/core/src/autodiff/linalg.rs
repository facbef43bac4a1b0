//! Thin GEMM wrappers over `ndarray` views of row-major buffers.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// `out (+)= op(a) · op(b)` where `op` optionally transposes. `a_dims` and
/// `b_dims` are the stored (rows, cols) of each buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    let av = ArrayView2::from_shape(a_dims, a).expect("lhs buffer matches dims");
    let bv = ArrayView2::from_shape(b_dims, b).expect("rhs buffer matches dims");
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    let (m, _) = av.dim();
    let (_, n) = bv.dim();
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("output buffer matches dims");
    general_mat_mul(1.0, &av, &bv, if accumulate { 1.0 } else { 0.0 }, &mut cv);
}

pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(a, (m, k), false, b, (k, n), false, &mut out, false);
    out
}

/// `a · bᵀ` with `b` stored as (n, k).
pub(crate) fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(a, (m, k), false, b, (n, k), true, &mut out, false);
    out
}

/// `aᵀ · b` with `a` stored as (k, m).
pub(crate) fn matmul_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(a, (k, m), true, b, (k, n), false, &mut out, false);
    out
}
