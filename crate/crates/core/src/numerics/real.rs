use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{Add, Div, Mul, Neg, Sub};

/// Explicit libm-backed math for plain `f64` code paths.
pub mod math {
    #[inline]
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    #[inline]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    #[inline]
    pub fn tanh(x: f64) -> f64 {
        libm::tanh(x)
    }
    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    #[inline]
    pub fn sin(x: f64) -> f64 {
        libm::sin(x)
    }
    #[inline]
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
    #[inline]
    pub fn pow(x: f64, y: f64) -> f64 {
        libm::pow(x, y)
    }
    #[inline]
    pub fn round(x: f64) -> f64 {
        libm::round(x)
    }
    #[inline]
    pub fn floor(x: f64) -> f64 {
        libm::floor(x)
    }

    /// `ln(sum(exp(xs)))`, stable; `-inf` for an empty slice.
    pub fn logsumexp(xs: &[f64]) -> f64 {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + ln(xs.iter().map(|&x| exp(x - m)).sum::<f64>())
    }
}

/// Scalar type losses are generic over.
///
/// Implemented by `f64` and by tape variables. Comparisons (`min`, `clamp`,
/// stabilizing maxima) branch on [`Real::value`] and differentiate the
/// selected branch.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant carrying no derivative.
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    fn min(self, other: Self) -> Self {
        if self.value() <= other.value() {
            self
        } else {
            other
        }
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        let v = self.value();
        if v < lo {
            Self::cst(lo)
        } else if v > hi {
            Self::cst(hi)
        } else {
            self
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        libm::log(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        libm::tanh(self)
    }
}

/// Sum in iteration order; zero for an empty iterator.
pub fn sum<S: Real>(xs: impl IntoIterator<Item = S>) -> S {
    let mut it = xs.into_iter();
    match it.next() {
        None => S::cst(0.0),
        Some(first) => it.fold(first, |acc, x| acc + x),
    }
}

pub fn logsumexp<S: Real>(xs: &[S]) -> S {
    let m = xs
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return S::cst(m);
    }
    sum(xs.iter().map(|&x| (x - m).exp())).ln() + m
}

pub fn log_softmax<S: Real>(row: &[S]) -> Vec<S> {
    let lse = logsumexp(row);
    row.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_matches_direct_arithmetic() {
        let row = [1.0, 2.0, 3.0];
        let ls = log_softmax(&row);
        let e = |x: f64| libm::exp(x);
        let expected = libm::log(e(3.0) / (e(1.0) + e(2.0) + e(3.0)));
        assert!((ls[2] - expected).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let xs = [1000.0, 1000.0];
        assert!((logsumexp(&xs) - (1000.0 + libm::log(2.0))).abs() < 1e-12);
        assert_eq!(math::logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn empty_sum_is_zero() {
        assert_eq!(sum::<f64>(core::iter::empty()), 0.0);
    }
}
