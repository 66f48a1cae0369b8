//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the estimators are generic over (`f32` or `f64`).
///
/// On top of [`Float`] this adds the complementary error function, which the
/// Gaussian kernel CDF needs, and a handful of precision-dependent tolerances.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn erfc(self) -> Self;

    /// Row-sum tolerance for stochastic vectors and matrices.
    fn stochastic_tol() -> Self;

    /// Fixed-point tolerance used by the stationary power iteration.
    fn stationary_tol() -> Self;

    /// Target accuracy of quantile inversion, in probability units.
    fn quantile_tol() -> Self;

    /// Smallest emission likelihood handed to the forward pass.
    fn likelihood_floor() -> Self;
}

impl Real for f64 {
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
    fn stochastic_tol() -> Self {
        1e-12
    }
    fn stationary_tol() -> Self {
        1e-12
    }
    fn quantile_tol() -> Self {
        1e-9
    }
    fn likelihood_floor() -> Self {
        1e-300
    }
}

impl Real for f32 {
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
    fn stochastic_tol() -> Self {
        1e-5
    }
    fn stationary_tol() -> Self {
        1e-6
    }
    fn quantile_tol() -> Self {
        1e-5
    }
    fn likelihood_floor() -> Self {
        f32::MIN_POSITIVE
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

#[inline]
pub fn from_usize<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("count representable in scalar type")
}

/// Standard normal density.
#[inline]
pub fn norm_pdf<T: Real>(x: T) -> T {
    let inv_sqrt_2pi: T = lit(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) / lit(2.0)).exp()
}

/// Standard normal distribution function, via `erfc` so the lower tail keeps
/// full relative precision.
#[inline]
pub fn norm_cdf<T: Real>(x: T) -> T {
    let inv_sqrt2: T = lit(std::f64::consts::FRAC_1_SQRT_2);
    lit::<T>(0.5) * (-x * inv_sqrt2).erfc()
}

/// Inverse of [`norm_cdf`] by bisection; `p` must lie in `(0, 1)`.
pub fn norm_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability {p} outside (0, 1)");
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Neumaier-compensated sum.
pub fn compensated_sum<T: Real, I: IntoIterator<Item = T>>(values: I) -> T {
    let mut sum = T::zero();
    let mut comp = T::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp = comp + ((sum - t) + v);
        } else {
            comp = comp + ((v - t) + sum);
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_reference_values() {
        assert_abs_diff_eq!(norm_pdf(0.0f64), 0.398_942_280_4, epsilon = 1e-10);
        assert_abs_diff_eq!(norm_pdf(1.0f64), 0.241_970_724_5, epsilon = 1e-10);
        assert_abs_diff_eq!(norm_cdf(0.0f64), 0.5, epsilon = 1e-16);
        assert_abs_diff_eq!(norm_cdf(2.0f64), 0.977_249_868_051_820_8, epsilon = 1e-15);
        assert_abs_diff_eq!(norm_cdf(-2.0f64), 0.022_750_131_948_179_2, epsilon = 1e-15);
        assert!(norm_cdf(-40.0f64) >= 0.0);
        assert_abs_diff_eq!(norm_cdf(1.0f32), 0.841_344_7, epsilon = 1e-6);
    }

    #[test]
    fn quantile_inverts_cdf() {
        assert_abs_diff_eq!(norm_quantile(0.5), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(norm_quantile(0.9), 1.281_551_565_544_600_4, epsilon = 1e-12);
        assert_abs_diff_eq!(norm_quantile(0.1), -1.281_551_565_544_600_4, epsilon = 1e-12);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }
}
