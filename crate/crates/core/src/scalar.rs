//! Floating-point scalar abstraction shared by the tensor and model code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Real scalar type a [`Tensor`](crate::Tensor) can carry.
///
/// Implemented for `f32` and `f64`. Training, checkpoints and the gradient
/// checker run at `f64`; `f32` is available for cheaper inference.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `c[m×n] += a[m×k] · b[k×n]` where each operand is addressed by a
    /// `(row stride, column stride)` pair.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
    );
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! blas_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                c: &mut [Self],
            ) {
                assert!(
                    a.len() >= span(m, k, a_strides),
                    "gemm: lhs buffer too small"
                );
                assert!(
                    b.len() >= span(k, n, b_strides),
                    "gemm: rhs buffer too small"
                );
                assert!(c.len() >= m * n, "gemm: output buffer too small");
                // SAFETY: the asserts above keep every strided access in bounds,
                // and `c` is exclusively borrowed and disjoint from `a` and `b`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        1.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

blas_scalar!(f32, matrixmultiply::sgemm);
blas_scalar!(f64, matrixmultiply::dgemm);
