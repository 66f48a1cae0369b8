//! Weighted Gaussian kernel density estimation and bootstrap bandwidth
//! selection.
//!
//! The selector follows the smoothed-bootstrap recipe: a pilot estimate with
//! bandwidth `sigma_0` (Silverman's rule on the weighted sample) defines a
//! reference density; `B` samples of size `N` are drawn from it; every
//! candidate bandwidth is fitted to every resample, and the candidate with the
//! smallest mean integrated squared deviation from the pilot wins.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::scalar::{from_usize, lit, norm_cdf, norm_pdf, Real};

/// Points in the grid used to integrate the squared deviation.
pub const BIMSE_GRID_POINTS: usize = 512;
/// Default number of bootstrap resamples.
pub const DEFAULT_RESAMPLES: usize = 20;
/// Default number of log-spaced candidates in `[sigma_0 / 8, 8 sigma_0]`.
pub const DEFAULT_CANDIDATES: usize = 16;

// Kernel contributions further than this many bandwidths away are below
// 1e-17 of the peak and are skipped on the grid.
const KERNEL_REACH: f64 = 9.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KdeError {
    #[error("sample is empty")]
    EmptySample,
    #[error("values and weights differ in length ({values} vs {weights})")]
    LengthMismatch { values: usize, weights: usize },
    #[error("value {index} is not finite")]
    NonFiniteValue { index: usize },
    #[error("weight {index} is not strictly positive and finite")]
    InvalidWeight { index: usize },
    #[error("bandwidth must be positive and finite")]
    InvalidBandwidth,
    #[error("bandwidth selection needs at least one candidate")]
    EmptyCandidates,
    #[error("candidate bandwidths must be positive, finite and sorted ascending")]
    InvalidCandidates,
    #[error("bandwidth selection needs at least two values, got {0}")]
    TooFewValues(usize),
    #[error("at least one bootstrap resample is required")]
    NoResamples,
}

/// Values with strictly positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample<T> {
    values: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> WeightedSample<T> {
    pub fn new(values: Vec<T>, weights: Vec<T>) -> Result<Self, KdeError> {
        if values.len() != weights.len() {
            return Err(KdeError::LengthMismatch {
                values: values.len(),
                weights: weights.len(),
            });
        }
        if values.is_empty() {
            return Err(KdeError::EmptySample);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(KdeError::NonFiniteValue { index });
        }
        if let Some(index) = weights.iter().position(|w| !(*w > T::zero()) || !w.is_finite()) {
            return Err(KdeError::InvalidWeight { index });
        }
        Ok(Self { values, weights })
    }

    pub fn unweighted(values: Vec<T>) -> Result<Self, KdeError> {
        let weights = vec![T::one(); values.len()];
        Self::new(values, weights)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn total_weight(&self) -> T {
        self.weights.iter().copied().sum()
    }

    pub fn weighted_mean(&self) -> T {
        let total = self.total_weight();
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| *v * *w)
            .sum::<T>()
            / total
    }

    pub fn weighted_std(&self) -> T {
        let total = self.total_weight();
        let mean = self.weighted_mean();
        let var = self
            .values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| *w * (*v - mean) * (*v - mean))
            .sum::<T>()
            / total;
        var.max(T::zero()).sqrt()
    }

    /// Kish effective sample size `(sum w)^2 / sum w^2`.
    pub fn effective_size(&self) -> T {
        let total = self.total_weight();
        let sq: T = self.weights.iter().map(|w| *w * *w).sum();
        total * total / sq
    }

    /// Silverman's rule `1.06 s n_eff^(-1/5)` on the weighted standard
    /// deviation. `None` when the sample has no spread.
    pub fn silverman_bandwidth(&self) -> Option<T> {
        let s = self.weighted_std();
        let h = lit::<T>(1.06) * s * self.effective_size().powf(lit(-0.2));
        (h > T::zero() && h.is_finite()).then_some(h)
    }

    pub fn min_value(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }
}

/// Weighted Gaussian KDE with a fixed bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel<T> {
    sample: WeightedSample<T>,
    bandwidth: T,
    total_weight: T,
}

impl<T: Real> KdeModel<T> {
    pub fn new(sample: WeightedSample<T>, bandwidth: T) -> Result<Self, KdeError> {
        if !(bandwidth > T::zero()) || !bandwidth.is_finite() {
            return Err(KdeError::InvalidBandwidth);
        }
        let total_weight = sample.total_weight();
        Ok(Self {
            sample,
            bandwidth,
            total_weight,
        })
    }

    pub fn sample(&self) -> &WeightedSample<T> {
        &self.sample
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    pub fn pdf(&self, y: T) -> T {
        let h = self.bandwidth;
        let s: T = self
            .sample
            .values
            .iter()
            .zip(&self.sample.weights)
            .map(|(v, w)| *w * norm_pdf((y - *v) / h))
            .sum();
        s / (h * self.total_weight)
    }

    pub fn cdf(&self, y: T) -> T {
        let h = self.bandwidth;
        let s: T = self
            .sample
            .values
            .iter()
            .zip(&self.sample.weights)
            .map(|(v, w)| *w * norm_cdf((y - *v) / h))
            .sum();
        (s / self.total_weight).min(T::one())
    }
}

/// Outcome of [`select_bandwidth`].
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthSelection<T> {
    pub bandwidth: T,
    pub pilot: T,
    pub candidates: Vec<T>,
    /// Bootstrap integrated squared error per candidate, same order as
    /// `candidates`. Empty for a degenerate sample.
    pub scores: Vec<T>,
    /// Every value was identical; the smallest candidate was returned.
    pub degenerate: bool,
}

/// `count` log-spaced values from `pilot / 8` to `8 pilot`.
pub fn default_candidates<T: Real>(pilot: T, count: usize) -> Vec<T> {
    log_spaced(pilot / lit(8.0), pilot * lit(8.0), count)
}

pub fn log_spaced<T: Real>(lo: T, hi: T, count: usize) -> Vec<T> {
    match count {
        0 => Vec::new(),
        1 => vec![(lo * hi).sqrt()],
        _ => {
            let (llo, lhi) = (lo.ln(), hi.ln());
            let step = (lhi - llo) / from_usize(count - 1);
            (0..count)
                .map(|i| {
                    if i == count - 1 {
                        hi
                    } else {
                        (llo + step * from_usize(i)).exp()
                    }
                })
                .collect()
        }
    }
}

/// Bootstrap bandwidth selection seeded from `seed`.
pub fn select_bandwidth<T: Real>(
    sample: &WeightedSample<T>,
    candidates: &[T],
    resamples: usize,
    seed: u64,
) -> Result<BandwidthSelection<T>, KdeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    select_bandwidth_with_rng(sample, candidates, resamples, &mut rng)
}

/// As [`select_bandwidth`], drawing from a caller-supplied generator.
///
/// All resamples are drawn before any candidate is scored, so the result
/// depends only on the generator state and the inputs.
pub fn select_bandwidth_with_rng<T: Real, R: Rng + ?Sized>(
    sample: &WeightedSample<T>,
    candidates: &[T],
    resamples: usize,
    rng: &mut R,
) -> Result<BandwidthSelection<T>, KdeError> {
    if candidates.is_empty() {
        return Err(KdeError::EmptyCandidates);
    }
    let sorted = candidates.windows(2).all(|w| w[0] <= w[1]);
    if !sorted || candidates.iter().any(|c| !(*c > T::zero()) || !c.is_finite()) {
        return Err(KdeError::InvalidCandidates);
    }
    if sample.len() < 2 {
        return Err(KdeError::TooFewValues(sample.len()));
    }
    if resamples == 0 {
        return Err(KdeError::NoResamples);
    }

    let Some(pilot) = sample.silverman_bandwidth() else {
        return Ok(BandwidthSelection {
            bandwidth: candidates[0],
            pilot: T::zero(),
            candidates: candidates.to_vec(),
            scores: Vec::new(),
            degenerate: true,
        });
    };

    let n = sample.len();
    let weights: Vec<f64> = sample
        .weights()
        .iter()
        .map(|w| w.to_f64().expect("finite weight"))
        .collect();
    let picker = WeightedIndex::new(&weights).expect("weights validated positive");
    let draws: Vec<Vec<T>> = (0..resamples)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let idx = picker.sample(rng);
                    let z: f64 = rng.sample(StandardNormal);
                    sample.values()[idx] + pilot * lit(z)
                })
                .collect()
        })
        .collect();

    let widest = *candidates.last().expect("nonempty");
    let reach = lit::<T>(4.0) * widest;
    let grid = Grid::new(
        sample.min_value() - reach,
        sample.max_value() + reach,
        BIMSE_GRID_POINTS,
    );

    let mut reference = vec![T::zero(); grid.points];
    let inv_total = T::one() / sample.total_weight();
    for (v, w) in sample.values().iter().zip(sample.weights()) {
        grid.add_kernel(*v, *w * inv_total, pilot, &mut reference);
    }

    let unit = T::one() / from_usize(n);
    let mut density = vec![T::zero(); grid.points];
    let scores: Vec<T> = candidates
        .iter()
        .map(|&h| {
            let mut acc = T::zero();
            for draw in &draws {
                density.iter_mut().for_each(|d| *d = T::zero());
                for &v in draw {
                    grid.add_kernel(v, unit, h, &mut density);
                }
                acc = acc + grid.trapezoid_sq_diff(&density, &reference);
            }
            acc / from_usize(resamples)
        })
        .collect();

    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if *s < scores[best] { i } else { best });
    Ok(BandwidthSelection {
        bandwidth: candidates[best],
        pilot,
        candidates: candidates.to_vec(),
        scores,
        degenerate: false,
    })
}

/// Uniform evaluation grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Grid<T> {
    start: T,
    step: T,
    points: usize,
}

impl<T: Real> Grid<T> {
    pub(crate) fn new(lo: T, hi: T, points: usize) -> Self {
        assert!(points >= 2);
        Self {
            start: lo,
            step: (hi - lo) / from_usize(points - 1),
            points,
        }
    }

    pub(crate) fn at(&self, j: usize) -> T {
        self.start + self.step * from_usize(j)
    }

    /// Adds `weight * phi((g - center) / h) / h` at every grid point `g`
    /// within the kernel reach.
    ///
    /// Walks outward from the grid point nearest `center` using the ratio
    /// recurrence of consecutive Gaussian values, so each point costs two
    /// multiplications instead of an `exp`.
    pub(crate) fn add_kernel(&self, center: T, weight: T, h: T, out: &mut [T]) {
        let step = self.step;
        let last = self.points - 1;
        let pos = ((center - self.start) / step).round();
        let j0 = if pos <= T::zero() {
            0
        } else {
            pos.to_usize().unwrap_or(last).min(last)
        };
        let d = self.at(j0) - center;
        let two_h2 = lit::<T>(2.0) * h * h;
        let reach = lit::<T>(KERNEL_REACH) * h;
        let scale = weight * norm_pdf(T::zero()) / h;
        let peak = scale * (-(d * d) / two_h2).exp();
        let shrink = (-(step * step) / (h * h)).exp();
        if d.abs() <= reach {
            out[j0] = out[j0] + peak;
        }

        // upward: offsets d + m*step
        let mut value = peak;
        let mut ratio = (-(lit::<T>(2.0) * d * step + step * step) / two_h2).exp();
        let mut j = j0;
        while j < last {
            j += 1;
            value = value * ratio;
            ratio = ratio * shrink;
            let off = self.at(j) - center;
            if off > reach {
                break;
            }
            if off >= -reach {
                out[j] = out[j] + value;
            }
        }

        // downward: offsets d - m*step
        let mut value = peak;
        let mut ratio = (-(-lit::<T>(2.0) * d * step + step * step) / two_h2).exp();
        let mut j = j0;
        while j > 0 {
            j -= 1;
            value = value * ratio;
            ratio = ratio * shrink;
            let off = self.at(j) - center;
            if off < -reach {
                break;
            }
            if off <= reach {
                out[j] = out[j] + value;
            }
        }
    }

    pub(crate) fn trapezoid_sq_diff(&self, a: &[T], b: &[T]) -> T {
        let sq = |j: usize| {
            let d = a[j] - b[j];
            d * d
        };
        let interior: T = (1..self.points - 1).map(sq).sum();
        self.step * (interior + (sq(0) + sq(self.points - 1)) / lit(2.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_point_peak() {
        let kde = KdeModel::new(WeightedSample::unweighted(vec![0.0]).unwrap(), 1.0).unwrap();
        assert_abs_diff_eq!(kde.pdf(0.0), 0.398_942_280_4, epsilon = 1e-10);
        assert_abs_diff_eq!(kde.cdf(0.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_pair() {
        let kde =
            KdeModel::new(WeightedSample::new(vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap(), 1.0)
                .unwrap();
        assert_abs_diff_eq!(kde.pdf(0.0), 0.241_970_724_5, epsilon = 1e-10);
        assert_abs_diff_eq!(kde.cdf(1.0 + 20.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            WeightedSample::new(vec![1.0], vec![0.0]).unwrap_err(),
            KdeError::InvalidWeight { index: 0 }
        );
        assert_eq!(
            WeightedSample::new(vec![f64::NAN], vec![1.0]).unwrap_err(),
            KdeError::NonFiniteValue { index: 0 }
        );
        assert!(WeightedSample::<f64>::new(vec![], vec![]).is_err());
        let s = WeightedSample::unweighted(vec![1.0, 2.0]).unwrap();
        assert_eq!(KdeModel::new(s.clone(), 0.0).unwrap_err(), KdeError::InvalidBandwidth);
        assert_eq!(
            select_bandwidth(&s, &[], 3, 1).unwrap_err(),
            KdeError::EmptyCandidates
        );
        assert_eq!(
            select_bandwidth(&s, &[0.5, 0.1], 3, 1).unwrap_err(),
            KdeError::InvalidCandidates
        );
        let one = WeightedSample::unweighted(vec![1.0]).unwrap();
        assert_eq!(
            select_bandwidth(&one, &[0.5], 3, 1).unwrap_err(),
            KdeError::TooFewValues(1)
        );
    }

    #[test]
    fn degenerate_sample_takes_smallest_candidate() {
        let s = WeightedSample::unweighted(vec![2.0; 5]).unwrap();
        let sel = select_bandwidth(&s, &[0.1, 0.2, 0.4], 5, 3).unwrap();
        assert!(sel.degenerate);
        assert_eq!(sel.bandwidth, 0.1);
    }

    #[test]
    fn single_candidate_wins() {
        let s = WeightedSample::unweighted(vec![0.1, 0.7, -0.3, 1.2]).unwrap();
        let pilot = s.silverman_bandwidth().unwrap();
        let sel = select_bandwidth(&s, &[pilot], 4, 9).unwrap();
        assert_eq!(sel.bandwidth, pilot);
        assert_eq!(sel.scores.len(), 1);
    }

    #[test]
    fn grid_kernel_matches_direct_evaluation() {
        let grid = Grid::new(-3.0f64, 4.0, 301);
        let mut out = vec![0.0; 301];
        let centers = [0.123, -2.9, 3.999, 1.5];
        let h = 0.37;
        for c in centers {
            grid.add_kernel(c, 0.25, h, &mut out);
        }
        for (j, got) in out.iter().enumerate() {
            let g = grid.at(j);
            let want: f64 = centers.iter().map(|c| 0.25 * norm_pdf((g - c) / h) / h).sum();
            assert_abs_diff_eq!(*got, want, epsilon = 1e-13);
        }
    }

    #[test]
    fn grid_kernel_handles_centers_off_grid() {
        let grid = Grid::new(0.0f64, 1.0, 11);
        let mut out = vec![0.0; 11];
        grid.add_kernel(-0.2, 1.0, 0.3, &mut out);
        grid.add_kernel(1.4, 1.0, 0.3, &mut out);
        for (j, got) in out.iter().enumerate() {
            let g = grid.at(j);
            let want = (norm_pdf((g + 0.2) / 0.3) + norm_pdf((g - 1.4) / 0.3)) / 0.3;
            assert_abs_diff_eq!(*got, want, epsilon = 1e-13);
        }
    }

    #[test]
    fn log_spacing_endpoints() {
        let c = default_candidates(1.0f64, 16);
        assert_eq!(c.len(), 16);
        assert_abs_diff_eq!(c[0], 0.125, epsilon = 1e-15);
        assert_eq!(c[15], 8.0);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }
}
