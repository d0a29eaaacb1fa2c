//! Row-major matrix kernels over the scalar type's strided GEMM.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    S::gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    S::gemm(m, k, n, a, (k, 1), b, (1, k), c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    S::gemm(m, k, n, a, (1, m), b, (n, 1), c);
}
