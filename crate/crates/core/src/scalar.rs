use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::tensor_io::DType;

/// Floating point element type used by every numeric path in the crate.
///
/// Implemented for `f32` (training, golden dumps) and `f64` (checks, gradient
/// verification).
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
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
    const DTYPE: DType;

    fn lit(x: f64) -> Self;

    /// `x ← eˣ` over a slice.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>);
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    fn exp_in_place(xs: &mut [f32]) {
        for x in xs {
            *x = exp_f32(*x);
        }
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Branch-free `expf` that the compiler can vectorize: round-to-nearest by
/// the 1.5·2²³ trick, Cody-Waite reduction, degree-6 minimax polynomial.
/// Inputs are clamped to `[-87, 88]`; NaN falls through the clamp and
/// propagates.
#[inline(always)]
fn exp_f32(input: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = input.clamp(-87.0, 88.0);
    let shifted = x * std::f32::consts::LOG2_E + ROUND;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let y = p * r * r + r + 1.0;
    // the integer n sits in the low mantissa bits of `shifted`
    let k = shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127);
    y * f32::from_bits(k << 23)
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_close_to_libm() {
        let mut xs: Vec<f32> = (0..=200_000).map(|i| -87.0 + 175.0 * i as f32 / 200_000.0).collect();
        xs.extend([0.0, -0.0, 1.0, -1.0, 1e-8, -1e-8]);
        let want: Vec<f64> = xs.iter().map(|&x| (x as f64).exp()).collect();
        f32::exp_in_place(&mut xs);
        for (got, want) in xs.iter().zip(&want) {
            let rel = ((*got as f64) - want).abs() / want;
            assert!(rel < 3e-7, "{got} vs {want}: {rel:e}");
        }
        let mut edge = [f32::NAN, -1e30, 0.0];
        f32::exp_in_place(&mut edge);
        assert!(edge[0].is_nan() && edge[1] < 1e-37 && edge[2] == 1.0);
    }
}
