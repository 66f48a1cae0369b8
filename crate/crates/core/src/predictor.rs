//! Ensemble density at a forecast step, quantile extraction by inverting the
//! mixture CDF, and q-risk scoring.

use serde::Serialize;
use thiserror::Error;

use crate::model::EnsembleModel;
use crate::scalar::{lit, Real};

/// Bisection steps; enough to shrink any bracket of width up to 1e30 below
/// double-precision spacing.
pub const BISECTION_MAX_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error("forecast input has {got} member predictions, model has {expected} members")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("member prediction {index} is not finite")]
    NonFinitePrediction { index: usize },
    #[error("could not bracket the {q} quantile (cdf {cdf_lo} at {lo}, {cdf_hi} at {hi})")]
    BracketFailure {
        q: f64,
        lo: f64,
        hi: f64,
        cdf_lo: f64,
        cdf_hi: f64,
    },
    #[error("actuals and predictions differ in length ({actuals} vs {predictions})")]
    LengthMismatch { actuals: usize, predictions: usize },
    #[error("sum of |actuals| is zero; q-risk is undefined")]
    ZeroDenominator,
    #[error("quantile level {0} is outside (0, 1)")]
    InvalidLevel(f64),
}

/// Member outputs for one forecast step.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastInput<T> {
    pub member_predictions: Vec<T>,
    pub label: String,
}

impl<T: Real> ForecastInput<T> {
    pub fn new(label: impl Into<String>, member_predictions: Vec<T>) -> Self {
        Self {
            member_predictions,
            label: label.into(),
        }
    }

    fn check(&self, model: &EnsembleModel<T>) -> Result<(), PredictError> {
        if self.member_predictions.len() != model.members() {
            return Err(PredictError::ShapeMismatch {
                got: self.member_predictions.len(),
                expected: model.members(),
            });
        }
        if let Some(index) = self.member_predictions.iter().position(|v| !v.is_finite()) {
            return Err(PredictError::NonFinitePrediction { index });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixtureComponent<T> {
    pub weight: T,
    pub shift: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleForecast<T> {
    pub label: String,
    pub quantile_value: T,
    pub level: T,
    /// `|CDF(quantile_value) - level|`.
    pub cdf_residual: T,
    pub components: Vec<MixtureComponent<T>>,
}

pub fn ensemble_pdf<T: Real>(model: &EnsembleModel<T>, input: &ForecastInput<T>, y: T) -> Result<T, PredictError> {
    input.check(model)?;
    Ok(mixture_pdf(model, &input.member_predictions, y))
}

pub fn ensemble_cdf<T: Real>(model: &EnsembleModel<T>, input: &ForecastInput<T>, y: T) -> Result<T, PredictError> {
    input.check(model)?;
    Ok(mixture_cdf(model, &input.member_predictions, y))
}

fn mixture_pdf<T: Real>(model: &EnsembleModel<T>, shifts: &[T], y: T) -> T {
    model
        .stationary
        .probs()
        .iter()
        .zip(&model.emissions)
        .zip(shifts)
        .map(|((w, e), m)| *w * e.pdf(y - *m))
        .sum()
}

fn mixture_cdf<T: Real>(model: &EnsembleModel<T>, shifts: &[T], y: T) -> T {
    model
        .stationary
        .probs()
        .iter()
        .zip(&model.emissions)
        .zip(shifts)
        .map(|((w, e), m)| *w * e.cdf(y - *m))
        .sum()
}

/// Interval that holds every component's mass up to ten bandwidths.
pub fn quantile_bracket<T: Real>(model: &EnsembleModel<T>, input: &ForecastInput<T>) -> (T, T) {
    let widest = model
        .emissions
        .iter()
        .map(|e| e.bandwidth())
        .fold(T::zero(), T::max);
    let pad = lit::<T>(10.0) * widest;
    let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
    for (e, m) in model.emissions.iter().zip(&input.member_predictions) {
        lo = lo.min(*m + e.min_residual());
        hi = hi.max(*m + e.max_residual());
    }
    (lo - pad, hi + pad)
}

/// Solves `CDF(tau) = q` by bisection on the analytic mixture CDF.
pub fn ensemble_quantile<T: Real>(
    model: &EnsembleModel<T>,
    input: &ForecastInput<T>,
) -> Result<EnsembleForecast<T>, PredictError> {
    input.check(model)?;
    let q = model.q;
    let shifts = &input.member_predictions;
    let cdf = |y: T| mixture_cdf(model, shifts, y);

    let (mut lo, mut hi) = quantile_bracket(model, input);
    let (mut f_lo, mut f_hi) = (cdf(lo), cdf(hi));
    if f_lo > q || f_hi < q {
        let mid = (lo + hi) / lit(2.0);
        let half = (hi - lo) * lit(5.0);
        lo = mid - half;
        hi = mid + half;
        f_lo = cdf(lo);
        f_hi = cdf(hi);
        if f_lo > q || f_hi < q {
            return Err(PredictError::BracketFailure {
                q: q.to_f64().unwrap_or(f64::NAN),
                lo: lo.to_f64().unwrap_or(f64::NAN),
                hi: hi.to_f64().unwrap_or(f64::NAN),
                cdf_lo: f_lo.to_f64().unwrap_or(f64::NAN),
                cdf_hi: f_hi.to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    for _ in 0..BISECTION_MAX_ITERS {
        let mid = lo + (hi - lo) / lit(2.0);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = cdf(mid);
        if f_mid < q {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
            f_hi = f_mid;
        }
    }
    let (tau, residual) = if (q - f_lo).abs() <= (f_hi - q).abs() {
        (lo, (q - f_lo).abs())
    } else {
        (hi, (f_hi - q).abs())
    };
    Ok(EnsembleForecast {
        label: input.label.clone(),
        quantile_value: tau,
        level: q,
        cdf_residual: residual,
        components: model
            .stationary
            .probs()
            .iter()
            .zip(shifts)
            .map(|(w, m)| MixtureComponent { weight: *w, shift: *m })
            .collect(),
    })
}

/// Pinball loss of predicting `predicted` for outcome `actual` at level `q`.
#[inline]
pub fn pinball<T: Real>(actual: T, predicted: T, q: T) -> T {
    if actual >= predicted {
        q * (actual - predicted)
    } else {
        (T::one() - q) * (predicted - actual)
    }
}

/// `2 sum P_q(y, y_hat) / sum |y|`.
pub fn q_risk<T: Real>(actuals: &[T], predicted: &[T], q: T) -> Result<T, PredictError> {
    if actuals.len() != predicted.len() {
        return Err(PredictError::LengthMismatch {
            actuals: actuals.len(),
            predictions: predicted.len(),
        });
    }
    if !(q > T::zero() && q < T::one()) {
        return Err(PredictError::InvalidLevel(q.to_f64().unwrap_or(f64::NAN)));
    }
    let denom: T = actuals.iter().map(|y| y.abs()).sum();
    if !(denom > T::zero()) {
        return Err(PredictError::ZeroDenominator);
    }
    let loss: T = actuals
        .iter()
        .zip(predicted)
        .map(|(y, p)| pinball(*y, *p, q))
        .sum();
    Ok(lit::<T>(2.0) * loss / denom)
}
