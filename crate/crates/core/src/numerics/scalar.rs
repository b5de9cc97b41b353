use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point element type of every tensor, parameter and kinematic
/// state. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag written into checkpoint manifests.
    const DTYPE: &'static str;

    /// Converts an `f64` literal. Rounds to nearest for narrower types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::infinity)
    }

    /// `c += a · b` on strided views: `a` is `[m, k]`, `b` is `[k, n]`,
    /// `c` is `[m, n]` with unit column stride and row stride `n`.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: (usize, usize), b: &[Self], b_strides: (usize, usize), c: &mut [Self]);
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_gemm {
    ($kernel:path) => {
        fn gemm(m: usize, k: usize, n: usize, a: &[Self], sa: (usize, usize), b: &[Self], sb: (usize, usize), c: &mut [Self]) {
            if m == 0 || n == 0 || k == 0 {
                return;
            }
            check_extent(a.len(), m, k, sa);
            check_extent(b.len(), k, n, sb);
            assert!(c.len() >= m * n, "gemm output out of bounds");
            // SAFETY: every index the kernel touches was bounds-checked above.
            unsafe {
                $kernel(
                    m, k, n, 1.0,
                    a.as_ptr(), sa.0 as isize, sa.1 as isize,
                    b.as_ptr(), sb.0 as isize, sb.1 as isize,
                    1.0,
                    c.as_mut_ptr(), n as isize, 1,
                );
            }
        }
    };
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    impl_gemm!(matrixmultiply::sgemm);
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    impl_gemm!(matrixmultiply::dgemm);
}
