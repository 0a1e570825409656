//! Scalar abstraction shared by the network, the losses and the metrics.
//!
//! Losses, scores and metrics only need [`num_traits::Float`], so they can be
//! evaluated on dual numbers for derivative checks. The network layers need
//! the stronger [`Scalar`] bound, which adds a dense matrix product.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point type the network can run on: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// `c <- alpha * a · b + beta * c` on strided row/column layouts.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 fits any float")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

fn check_extents(
    m: usize,
    k: usize,
    n: usize,
    a: (usize, (usize, usize)),
    b: (usize, (usize, usize)),
    c: (usize, (usize, usize)),
) {
    assert!(extent(m, k, a.1) <= a.0, "gemm: lhs slice too short");
    assert!(extent(k, n, b.1) <= b.0, "gemm: rhs slice too short");
    assert!(extent(m, n, c.1) <= c.0, "gemm: output slice too short");
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extents(
                    m,
                    k,
                    n,
                    (a.len(), a_strides),
                    (b.len(), b_strides),
                    (c.len(), c_strides),
                );
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every strided access stays inside the slices checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major `c = a · b` (or `+=` when `accumulate`), with optional transposes.
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    a_shape: (usize, usize),
    trans_a: bool,
    b: &[T],
    b_shape: (usize, usize),
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (ar, ac) = a_shape;
    let (br, bc) = b_shape;
    let (m, k, a_strides) = if trans_a { (ac, ar, (1, ac)) } else { (ar, ac, (ac, 1)) };
    let (k2, n, b_strides) = if trans_b { (bc, br, (1, bc)) } else { (br, bc, (bc, 1)) };
    assert_eq!(k, k2, "matmul: inner dimensions differ");
    assert_eq!(c.len(), m * n, "matmul: output has wrong size");
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, a_strides, b, b_strides, beta, c, (n, 1));
}
