use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar the mixture math is generic over.
///
/// Training runs in `f32` (the checkpoint precision); gradient checks run the
/// same code in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn of_f32(v: f32) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn of_f32(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

/// Numerically stable `log(sum(exp(v)))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let mut sum = T::zero();
    for &v in values {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_direct_sum() {
        let v = [0.1f64, -2.0, 3.5];
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-12);
    }

    #[test]
    fn lse_survives_huge_negative_values() {
        let v = [-1e6f32, -1e6 - 1.0];
        let got = log_sum_exp(&v);
        assert!(got.is_finite());
        assert!((got - (-1e6 + (1.0f32 + (-1.0f32).exp()).ln())).abs() < 1.0);
    }

    #[test]
    fn lse_empty_is_neg_inf() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
    }
}
