use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating point element type of the network. Inference and training run in
/// `f32`; gradient checks instantiate the same code with `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar")
    }

    /// `tanh`, possibly through a cheaper approximation that is exact to the
    /// type's precision.
    fn tanh_fast(self) -> Self {
        self.tanh()
    }

    /// `exp`, possibly through a cheaper approximation accurate to a few ulps.
    fn exp_fast(self) -> Self {
        self.exp()
    }

    /// `c ← a·b` (or `c + a·b`); see [`crate::network::linalg`].
    fn matmul_into(
        c: &mut ArrayViewMut2<'_, Self>,
        a: ArrayView2<'_, Self>,
        b: ArrayView2<'_, Self>,
        accumulate: bool,
    ) {
        crate::network::linalg::ndarray_matmul_into(c, a, b, accumulate);
    }
}

impl Scalar for f32 {
    /// Range reduction to `2^n · e^r`, `|r| ≤ ln2/2`, with a degree-6
    /// polynomial. Written without branches, calls or float→int casts so
    /// softmax rows vectorize. Inputs below −87.3 flush to zero.
    fn exp_fast(self) -> Self {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        // 1.5·2^23: adding it rounds to an integer held in the low mantissa bits.
        const SHIFT: f32 = 12_582_912.0;
        // min/max lower to single instructions; `clamp` does not vectorize.
        #[allow(clippy::manual_clamp)]
        let x = self.min(88.37).max(-87.3);
        let t = x * LOG2E + SHIFT;
        let n = t - SHIFT;
        let r = x - n * LN2_HI - n * LN2_LO;
        let p = 1.0
            + r * (1.0
                + r * (0.5 + r * (1.666_666_7e-1 + r * (4.166_666_8e-2 + r * (8.333_452e-3 + r * 1.388_731_6e-3)))));
        let ni = t.to_bits().wrapping_sub(SHIFT.to_bits());
        let scale = f32::from_bits(ni.wrapping_add(127) << 23);
        let y = p * scale;
        let y = if self < -87.3 { 0.0 } else { y };
        if self.is_nan() {
            self
        } else {
            y
        }
    }

    fn matmul_into(
        c: &mut ArrayViewMut2<'_, Self>,
        a: ArrayView2<'_, Self>,
        b: ArrayView2<'_, Self>,
        accumulate: bool,
    ) {
        crate::network::linalg::f32_matmul_into(c, a, b, accumulate);
    }

    /// Rational minimax approximation (the one Eigen uses), a few ulps from
    /// libm and free of calls, so the GELU loops vectorize.
    fn tanh_fast(self) -> Self {
        const CLAMP: f32 = 7.905_311;
        const A: [f32; 7] = [
            4.893_524_6e-3,
            6.372_619_3e-4,
            1.485_722_4e-5,
            5.122_297e-8,
            -8.604_672e-11,
            2.000_188e-13,
            -2.760_768_5e-16,
        ];
        const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347e-4, 1.198_258_4e-6];
        #[allow(clippy::manual_clamp)]
        let x = self.max(-CLAMP).min(CLAMP);
        let x2 = x * x;
        let mut p = A[6];
        for &a in A[..6].iter().rev() {
            p = p * x2 + a;
        }
        let q = ((B[3] * x2 + B[2]) * x2 + B[1]) * x2 + B[0];
        x * p / q
    }
}

impl Scalar for f64 {}
