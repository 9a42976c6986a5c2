//! Flat-slice numeric kernels shared by the tape and its oracles.
//!
//! Every reduction runs in a fixed sequential order (ascending inner index),
//! so results are bit-identical across runs and match a naive triple loop.

use crate::tensor::Scalar;

/// C[m x n] = A[m x k] * B[k x n], row-major. ikj loop order: each output
/// element accumulates over k in ascending order, same as the naive ijk loop,
/// while the innermost j loop vectorizes.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
    c
}

/// Out[n x m] = transpose of A[m x n].
pub fn transpose<F: Scalar>(a: &[F], m: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * n);
    let mut t = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// y += x, elementwise.
pub fn axpy_inplace<F: Scalar>(y: &mut [F], x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + *xi;
    }
}

/// Numerically stable log-sum-exp of a slice, summed in ascending index order.
pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mut mx = row[0];
    for &v in &row[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut s = F::zero();
    for &v in row {
        s = s + (v - mx).exp();
    }
    s.ln() + mx
}
