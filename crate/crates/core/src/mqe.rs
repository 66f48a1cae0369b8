//! Residual densities whose `q`-quantile is pinned at zero.
//!
//! Each member's residual density is a weighted Gaussian KDE in which the
//! residuals at or below zero share one multiplier and the positive residuals
//! another. The two multipliers are the unique solution of the 2x2 system
//! "total mass is one" and "mass at or below zero is `q`".

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::TimeSeriesFrame;
use crate::scalar::{lit, norm_cdf, norm_pdf, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MqeError {
    #[error("missing value for member {member} at row {row}")]
    MissingData { row: usize, member: usize },
    #[error("residuals and weights differ in length ({residuals} vs {weights})")]
    LengthMismatch { residuals: usize, weights: usize },
    #[error("all residuals lie on one side of zero")]
    OneSidedResiduals,
    #[error("side-constant system is singular (determinant {det:e})")]
    SingularSystem { det: f64 },
    #[error("quantile level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("weights must be nonnegative and finite with positive total")]
    InvalidWeights,
    #[error("bandwidth must be positive and finite")]
    InvalidBandwidth,
    #[error("residual {index} is not finite")]
    NonFiniteResidual { index: usize },
}

/// `T x K` residuals `y_t - M_k(X_t)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix<T> {
    steps: usize,
    members: usize,
    entries: Vec<T>,
}

impl<T: Real> ResidualMatrix<T> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn members(&self) -> usize {
        self.members
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> T {
        self.entries[t * self.members + k]
    }

    pub fn column(&self, k: usize) -> Vec<T> {
        (0..self.steps).map(|t| self.get(t, k)).collect()
    }
}

pub fn build_residuals<T: Real>(series: &TimeSeriesFrame<T>) -> Result<ResidualMatrix<T>, MqeError> {
    let steps = series.len();
    let members = series.members();
    let mut entries = Vec::with_capacity(steps * members);
    for t in 0..steps {
        let y = series.targets()[t];
        for k in 0..members {
            let m = series.prediction(t, k);
            let r = y - m;
            if !r.is_finite() {
                return Err(MqeError::MissingData { row: t, member: k });
            }
            entries.push(r);
        }
    }
    Ok(ResidualMatrix {
        steps,
        members,
        entries,
    })
}

/// Multipliers for the `<= 0` and `> 0` residual groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideConstants<T> {
    pub w_neg: T,
    pub w_pos: T,
}

/// Solves for the side multipliers.
///
/// The result may have a negative component when no nonnegative pair can put
/// the `q`-quantile at zero; callers decide how to handle that.
pub fn solve_side_constants<T: Real>(
    residuals: &[T],
    gamma: &[T],
    bandwidth: T,
    q: T,
) -> Result<SideConstants<T>, MqeError> {
    check_inputs(residuals, gamma, bandwidth, q)?;
    // mass and below-zero mass of each side, before the multipliers
    let (mut g_neg, mut g_pos, mut v_neg, mut v_pos) = (T::zero(), T::zero(), T::zero(), T::zero());
    let mut n_neg = 0usize;
    let mut n_pos = 0usize;
    for (&e, &g) in residuals.iter().zip(gamma) {
        let below = norm_cdf(-e / bandwidth);
        if e <= T::zero() {
            g_neg = g_neg + g;
            v_neg = v_neg + below * g;
            n_neg += 1;
        } else {
            g_pos = g_pos + g;
            v_pos = v_pos + below * g;
            n_pos += 1;
        }
    }
    if n_neg == 0 || n_pos == 0 || g_neg == T::zero() || g_pos == T::zero() {
        return Err(MqeError::OneSidedResiduals);
    }
    let det = g_neg * v_pos - g_pos * v_neg;
    if det.abs() <= T::from_f64(1e-14).unwrap() * g_neg * g_pos {
        return Err(MqeError::SingularSystem {
            det: det.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(SideConstants {
        w_neg: (v_pos - q * g_pos) / det,
        w_pos: (q * g_neg - v_neg) / det,
    })
}

fn check_inputs<T: Real>(residuals: &[T], gamma: &[T], bandwidth: T, q: T) -> Result<(), MqeError> {
    if residuals.len() != gamma.len() {
        return Err(MqeError::LengthMismatch {
            residuals: residuals.len(),
            weights: gamma.len(),
        });
    }
    if !(q > T::zero() && q < T::one()) {
        return Err(MqeError::InvalidLevel(q.to_f64().unwrap_or(f64::NAN)));
    }
    if !(bandwidth > T::zero()) || !bandwidth.is_finite() {
        return Err(MqeError::InvalidBandwidth);
    }
    if let Some(index) = residuals.iter().position(|r| !r.is_finite()) {
        return Err(MqeError::NonFiniteResidual { index });
    }
    let total: T = gamma.iter().copied().sum();
    if gamma.iter().any(|g| !g.is_finite() || *g < T::zero()) || !(total > T::zero()) {
        return Err(MqeError::InvalidWeights);
    }
    Ok(())
}

/// Reach of [`MqeEmission::pdf_many`] in bandwidths; `phi(12) / phi(0)` is
/// about `5e-32`.
pub const BATCH_REACH: f64 = 12.0;
/// Relative kernel weight below which [`MqeEmission::pdf_many`] drops a term.
pub const BATCH_WEIGHT_CUTOFF: f64 = 1e-20;

/// Block width of the batch evaluator, in bandwidths.
const BLOCK_WIDTH: f64 = 0.25;
/// Taylor terms per block. Within reach `|t d| <= 1.55`, so the first
/// dropped term is below `1e-16` of the block's value.
const BLOCK_TERMS: usize = 22;

/// Per-block Taylor moments of a Gaussian kernel sum.
///
/// With `u = (x - a) / h` and `d = (e - a) / h` about a block centre `a`,
/// `exp(-(u - d)^2 / 2) = exp(-u^2 / 2) exp(-d^2 / 2) sum_n u^n d^n / n!`, so
/// each block stores `m_n = sum_j c_j exp(-d_j^2 / 2) d_j^n / n!`.
struct BlockSums<T> {
    origin: T,
    width: T,
    inv_h: T,
    index: Vec<i64>,
    moments: Vec<[T; BLOCK_TERMS]>,
}

impl<T: Real> BlockSums<T> {
    /// `kernels` are `(centre, weight)` sorted by centre.
    fn new(kernels: &[(T, T)], h: T) -> Self {
        let origin = kernels[0].0;
        let width = h * lit(BLOCK_WIDTH);
        let mut sums = Self {
            origin,
            width,
            inv_h: T::one() / h,
            index: Vec::new(),
            moments: Vec::new(),
        };
        for &(e, c) in kernels {
            let b = ((e - origin) / width).floor().to_i64().expect("block index fits");
            if sums.index.last() != Some(&b) {
                sums.index.push(b);
                sums.moments.push([T::zero(); BLOCK_TERMS]);
            }
            let d = (e - sums.centre(b)) * sums.inv_h;
            let mut term = c * (-(d * d) / lit(2.0)).exp();
            let m = sums.moments.last_mut().expect("block pushed");
            for (n, slot) in m.iter_mut().enumerate() {
                *slot = *slot + term;
                term = term * d / lit((n + 1) as f64);
            }
        }
        sums
    }

    fn centre(&self, b: i64) -> T {
        self.origin + (lit::<T>(b as f64) + lit(0.5)) * self.width
    }

    fn eval(&self, x: T) -> T {
        let w: T = lit(BLOCK_WIDTH);
        let reach: T = lit(BATCH_REACH / BLOCK_WIDTH);
        let at = (x - self.origin) / self.width;
        let (lo, hi) = ((at - reach).floor(), (at + reach).floor());
        let start = self.index.partition_point(|&b| lit::<T>(b as f64) < lo);
        let shrink = (-(w * w)).exp();
        let (mut envelope, mut ratio) = (T::zero(), T::zero());
        let mut previous: Option<i64> = None;
        let mut total = T::zero();
        for (&b, m) in self.index[start..].iter().zip(&self.moments[start..]) {
            if lit::<T>(b as f64) > hi {
                break;
            }
            let t = (x - self.centre(b)) * self.inv_h;
            if previous.is_some_and(|p| p + 1 == b) {
                // exp(-t^2/2) for t one block closer, from the previous block
                envelope = envelope * ratio;
                ratio = ratio * shrink;
            } else {
                envelope = (-(t * t) / lit(2.0)).exp();
                ratio = (t * w - w * w / lit(2.0)).exp();
            }
            previous = Some(b);
            let series = m.iter().rev().fold(T::zero(), |acc, &mn| acc * t + mn);
            total = total + envelope * series;
        }
        total * norm_pdf(T::zero()) * self.inv_h
    }
}

/// Why the zero-quantile constraint was dropped for an emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintFallback {
    OneSidedResiduals,
    NegativeWeight,
    SingularSystem,
}

/// Constrained residual density of one member.
#[derive(Debug, Clone, PartialEq)]
pub struct MqeEmission<T> {
    residuals: Vec<T>,
    gamma: Vec<T>,
    bandwidth: T,
    w_neg: T,
    w_pos: T,
    q: T,
    fallback: Option<ConstraintFallback>,
    // per-residual kernel weight: side multiplier times gamma
    coefficients: Vec<T>,
}

impl<T: Real> MqeEmission<T> {
    /// Builds the constrained density. When the constraint cannot be met with
    /// nonnegative multipliers, both multipliers are set to `1 / sum(gamma)`
    /// (a plain weighted KDE) and the reason is recorded in
    /// [`fallback`](Self::fallback).
    pub fn fit(residuals: Vec<T>, gamma: Vec<T>, bandwidth: T, q: T) -> Result<Self, MqeError> {
        let solved = solve_side_constants(&residuals, &gamma, bandwidth, q);
        let (constants, fallback) = match solved {
            Ok(c) if c.w_neg >= T::zero() && c.w_pos >= T::zero() => (c, None),
            Ok(_) => (plain(&gamma), Some(ConstraintFallback::NegativeWeight)),
            Err(MqeError::OneSidedResiduals) => {
                (plain(&gamma), Some(ConstraintFallback::OneSidedResiduals))
            }
            Err(MqeError::SingularSystem { .. }) => {
                (plain(&gamma), Some(ConstraintFallback::SingularSystem))
            }
            Err(e) => return Err(e),
        };
        Ok(Self::from_parts(
            residuals,
            gamma,
            bandwidth,
            constants.w_neg,
            constants.w_pos,
            q,
            fallback,
        ))
    }

    /// Reassembles an emission from stored parameters without re-solving.
    pub fn from_parts(
        residuals: Vec<T>,
        gamma: Vec<T>,
        bandwidth: T,
        w_neg: T,
        w_pos: T,
        q: T,
        fallback: Option<ConstraintFallback>,
    ) -> Self {
        let mut e = Self {
            residuals,
            gamma,
            bandwidth,
            w_neg,
            w_pos,
            q,
            fallback,
            coefficients: Vec::new(),
        };
        e.refresh_coefficients();
        e
    }

    fn refresh_coefficients(&mut self) {
        self.coefficients = self
            .residuals
            .iter()
            .zip(&self.gamma)
            .map(|(&e, &g)| if e <= T::zero() { self.w_neg * g } else { self.w_pos * g })
            .collect();
    }

    pub fn residuals(&self) -> &[T] {
        &self.residuals
    }

    pub fn gamma(&self) -> &[T] {
        &self.gamma
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    pub fn w_neg(&self) -> T {
        self.w_neg
    }

    pub fn w_pos(&self) -> T {
        self.w_pos
    }

    pub fn q(&self) -> T {
        self.q
    }

    pub fn fallback(&self) -> Option<ConstraintFallback> {
        self.fallback
    }

    pub fn min_residual(&self) -> T {
        self.residuals.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_residual(&self) -> T {
        self.residuals.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn pdf(&self, eps: T) -> T {
        let h = self.bandwidth;
        let s: T = self
            .residuals
            .iter()
            .zip(&self.coefficients)
            .map(|(&e, &c)| c * norm_pdf((eps - e) / h))
            .sum();
        (s / h).max(T::zero())
    }

    /// [`pdf`](Self::pdf) at many points at once.
    ///
    /// Kernels are grouped into blocks a quarter bandwidth wide and each
    /// block's sum is expanded in a Taylor series about its centre, so a point
    /// costs one short polynomial per nearby block instead of one `exp` per
    /// kernel. Blocks centred more than [`BATCH_REACH`] bandwidths away and
    /// kernels whose weight is below [`BATCH_WEIGHT_CUTOFF`] times the largest
    /// are skipped. The result agrees with [`pdf`](Self::pdf) to about `1e-12`
    /// relative, plus the skipped tails.
    pub fn pdf_many(&self, points: &[T]) -> Vec<T> {
        let largest = self.coefficients.iter().copied().fold(T::zero(), T::max);
        let cutoff = largest * lit(BATCH_WEIGHT_CUTOFF);
        let mut kernels: Vec<(T, T)> = self
            .residuals
            .iter()
            .zip(&self.coefficients)
            .filter(|(_, c)| **c > cutoff)
            .map(|(e, c)| (*e, *c))
            .collect();
        if kernels.is_empty() {
            return vec![T::zero(); points.len()];
        }
        kernels.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("residuals are finite"));
        let blocks = BlockSums::new(&kernels, self.bandwidth);
        points.iter().map(|&x| blocks.eval(x).max(T::zero())).collect()
    }

    pub fn cdf(&self, eps: T) -> T {
        let h = self.bandwidth;
        let s: T = self
            .residuals
            .iter()
            .zip(&self.coefficients)
            .map(|(&e, &c)| c * norm_cdf((eps - e) / h))
            .sum();
        s.max(T::zero()).min(T::one())
    }
}

fn plain<T: Real>(gamma: &[T]) -> SideConstants<T> {
    let total: T = gamma.iter().copied().sum();
    SideConstants {
        w_neg: T::one() / total,
        w_pos: T::one() / total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::TimeSeriesFrame;
    use approx::assert_abs_diff_eq;

    #[test]
    fn residuals_of_perfect_member_are_zero() {
        let f = TimeSeriesFrame::new(
            vec!["2024-01-01".into(), "2024-01-02".into()],
            vec![1.0, 2.0],
            vec![1.0, 2.0],
            vec!["a".into()],
            0.5,
        )
        .unwrap();
        let r = build_residuals(&f).unwrap();
        assert_eq!(r.column(0), vec![0.0, 0.0]);
    }

    #[test]
    fn residual_arithmetic() {
        let f = TimeSeriesFrame::new(
            vec!["2024-01-01".into(), "2024-01-02".into()],
            vec![3.0, 5.0],
            vec![1.0, 1.0],
            vec!["a".into()],
            0.5,
        )
        .unwrap();
        assert_eq!(build_residuals(&f).unwrap().column(0), vec![2.0, 4.0]);
    }

    #[test]
    fn symmetric_pair_gets_equal_weights() {
        let c = solve_side_constants(&[-1.3, 1.3], &[0.7, 0.7], 0.8, 0.5).unwrap();
        assert_abs_diff_eq!(c.w_neg, 1.0 / 1.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c.w_pos, 1.0 / 1.4, epsilon = 1e-12);
    }

    #[test]
    fn hand_solved_two_point_system() {
        // v1 = Phi(2), v2 = Phi(-2); equations w1 + w2 = 1, w1 v1 + w2 v2 = 0.9
        let v1 = 0.977_249_868_051_820_8;
        let v2 = 0.022_750_131_948_179_2;
        let w1 = (0.9 - v2) / (v1 - v2);
        let w2 = 1.0 - w1;
        let c = solve_side_constants(&[-1.0, 1.0], &[1.0, 1.0], 0.5, 0.9).unwrap();
        assert_abs_diff_eq!(c.w_neg, w1, epsilon = 1e-12);
        assert_abs_diff_eq!(c.w_pos, w2, epsilon = 1e-12);
        assert_abs_diff_eq!(c.w_neg + c.w_pos, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.w_neg * v1 + c.w_pos * v2, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn zero_counts_as_non_positive() {
        assert_eq!(
            solve_side_constants(&[0.0], &[1.0], 1.0, 0.5).unwrap_err(),
            MqeError::OneSidedResiduals
        );
        assert_eq!(
            solve_side_constants(&[0.0, 0.5, 1.0], &[1.0, 0.0, 0.0], 1.0, 0.5).unwrap_err(),
            MqeError::OneSidedResiduals
        );
    }

    #[test]
    fn one_sided_falls_back_to_plain_kde() {
        let e = MqeEmission::fit(vec![0.5, 1.0, 2.0], vec![1.0, 1.0, 2.0], 0.4, 0.5).unwrap();
        assert_eq!(e.fallback(), Some(ConstraintFallback::OneSidedResiduals));
        assert_abs_diff_eq!(e.w_neg(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(e.w_pos(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(e.cdf(50.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn extreme_level_falls_back_on_negative_weight() {
        // wide kernel: the negative side cannot hold 99% of the mass below 0
        let e = MqeEmission::fit(vec![-0.1, 0.1, 3.0], vec![1.0; 3], 2.0, 0.99).unwrap();
        assert_eq!(e.fallback(), Some(ConstraintFallback::NegativeWeight));
    }

    #[test]
    fn symmetric_density_at_origin() {
        let e = MqeEmission::fit(vec![-1.0, 1.0], vec![1.0, 1.0], 1.0, 0.5).unwrap();
        assert_eq!(e.fallback(), None);
        assert_abs_diff_eq!(e.pdf(0.0), 0.241_970_724_5, epsilon = 1e-10);
        assert_abs_diff_eq!(e.cdf(0.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn constraint_holds_after_fit() {
        let r = vec![-2.0, -0.4, 0.1, 0.3, 0.8, 1.7, 2.5];
        let g = vec![0.2, 0.9, 0.4, 1.0, 0.6, 0.3, 0.1];
        for q in [0.1, 0.5, 0.9] {
            let e = MqeEmission::fit(r.clone(), g.clone(), 0.3, q).unwrap();
            if e.fallback().is_none() {
                assert_abs_diff_eq!(e.cdf(0.0), q, epsilon = 1e-10);
            }
        }
        assert!(matches!(
            MqeEmission::fit(r.clone(), g.clone(), 0.3, 1.0),
            Err(MqeError::InvalidLevel(_))
        ));
        assert!(matches!(
            MqeEmission::fit(r, vec![0.0; 7], 0.3, 0.5),
            Err(MqeError::InvalidWeights)
        ));
    }

    #[test]
    fn batch_density_agrees_with_pointwise() {
        let r: Vec<f64> = (0..200).map(|i| ((i * 73) % 101) as f64 * 0.1 - 5.0).collect();
        let g: Vec<f64> = (0..200).map(|i| if i % 7 == 0 { 1e-40 } else { 0.5 + (i % 5) as f64 * 0.1 }).collect();
        let e = MqeEmission::fit(r.clone(), g, 0.25, 0.3).unwrap();
        let points: Vec<f64> = r.iter().map(|x| x + 0.01).chain([-40.0, 40.0]).collect();
        let peak = e.pdf_many(&points).into_iter().fold(0.0, f64::max);
        for (x, v) in points.iter().zip(e.pdf_many(&points)) {
            // rounding from the different summation order plus the skipped tails
            assert!((v - e.pdf(*x)).abs() <= 1e-13 * v + 200.0 * 1e-20 * peak);
        }
    }

    #[test]
    fn batch_density_across_block_layouts() {
        // clustered, sparse and far-off residuals against several bandwidths
        let r: Vec<f64> = (0..300)
            .map(|i| {
                let u = ((i * 7919) % 1000) as f64 / 1000.0;
                match i % 3 {
                    0 => -5.0 + u,
                    1 => 3.0 * u * u,
                    _ => 40.0 * u - 20.0,
                }
            })
            .collect();
        let g: Vec<f64> = (0..300).map(|i| 0.1 + ((i * 31) % 17) as f64 / 17.0).collect();
        for h in [0.003, 0.05, 0.4, 3.0] {
            let e = MqeEmission::fit(r.clone(), g.clone(), h, 0.4).unwrap();
            let points: Vec<f64> = (0..400).map(|i| -30.0 + 60.0 * i as f64 / 399.0).chain(r.iter().copied()).collect();
            for (x, v) in points.iter().zip(e.pdf_many(&points)) {
                let direct = e.pdf(*x);
                assert!((v - direct).abs() <= 1e-12 * direct + 1e-30, "h {h} x {x}: {v} vs {direct}");
            }
        }
        let e32 = MqeEmission::fit(vec![-1.0f32, -0.2, 0.3, 2.0], vec![1.0; 4], 0.5, 0.5).unwrap();
        for x in [-3.0f32, -0.1, 0.0, 1.7] {
            assert!((e32.pdf_many(&[x])[0] - e32.pdf(x)).abs() <= 1e-5 * e32.pdf(x));
        }
    }
}
