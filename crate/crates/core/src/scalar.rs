//! Floating-point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type the models are generic over: `f32` or `f64`.
///
/// Gradient checks and the identity tests run in `f64`; `f32` is fine for
/// training loops.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
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
        Self::from_f64(x).expect("f64 converts to any Float")
    }

    #[inline]
    fn to64(self) -> f64 {
        self.to_f64().expect("Float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `ln(2π)`
pub fn ln_two_pi<T: Scalar>() -> T {
    T::of(2.0 * std::f64::consts::PI).ln()
}

/// Numerically stable `log(Σ exp(xs))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// `log((1/n) Σ exp(xs))`
pub fn log_mean_exp<T: Scalar>(xs: &[T]) -> T {
    log_sum_exp(xs) - T::of(xs.len() as f64).ln()
}

/// Softmax weights `exp(x_k - LSE(x))`, summing to one.
pub fn softmax<T: Scalar>(xs: &[T]) -> Vec<T> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| (x - lse).exp()).collect()
}

/// Logistic sigmoid evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_large_inputs() {
        let xs = [1234.0f64, 1232.0];
        let expected = 1232.0 + (2f64.exp() + 1.0).ln();
        assert!((log_sum_exp(&xs) - expected).abs() < 1e-12);
        assert!((xs[0].exp() + xs[1].exp()).ln().is_infinite());
    }

    #[test]
    fn log_sum_exp_empty_and_neg_inf() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_sums_to_one() {
        let w = softmax(&[-1000.0f64, -1001.0, -999.5, 3.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }
}
