//! Floating-point element types.
//!
//! Everything numeric in the crate is generic over [`Scalar`]; `f32` is the
//! training precision and `f64` the precision for oracles, gradient checks and
//! bit-reproducible runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name used in reports ("f32" / "f64").
    const NAME: &'static str;
    /// Size of one element in bytes.
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` for row/column strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self;

    /// Appends the little-endian bytes of `self`.
    fn write_le(self, out: &mut Vec<u8>);
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a, m, k, a_strides);
                check_extent(b, k, n, b_strides);
                check_extent(c, m, n, c_strides);
                // SAFETY: the extents above guarantee every strided access of
                // the three operands stays inside its slice; `c` is exclusively
                // borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    )
                }
            }

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
        }
    };
}

fn check_extent<T>(buf: &[T], rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < buf.len(), "gemm operand out of bounds");
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Converts an `f64` literal into the working precision.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}
