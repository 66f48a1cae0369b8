//! Independent reference computations and deterministic fixture generators
//! shared by the integration and acceptance tests.
//!
//! Nothing here reuses the recursions under test: posteriors come from
//! enumerating every state path, stationary distributions from a dense linear
//! solve, spectral radii from an eigen-decomposition and integrals from
//! adaptive Simpson quadrature.

use nalgebra::DMatrix;
use ptse_core::hmm::{StateDistribution, TransitionMatrix};
use ptse_core::mqe::MqeEmission;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-stochastic matrix with entries bounded away from zero by `floor`
/// before normalization.
pub fn random_stochastic<R: Rng>(k: usize, floor: f64, rng: &mut R) -> TransitionMatrix<f64> {
    let raw = (0..k * k).map(|_| floor + rng.random::<f64>()).collect();
    TransitionMatrix::normalized_rows(k, raw).0
}

pub fn random_distribution<R: Rng>(k: usize, rng: &mut R) -> StateDistribution<f64> {
    StateDistribution::normalized((0..k).map(|_| 0.05 + rng.random::<f64>()).collect()).unwrap()
}

/// Exact posteriors of a small HMM, by summing over all `K^T` state paths.
pub struct Enumerated {
    pub log_likelihood: f64,
    /// `gamma[t][k]`
    pub gamma: Vec<Vec<f64>>,
    /// `xi[t][i][j]` for `t < T - 1`
    pub xi: Vec<Vec<Vec<f64>>>,
}

/// `likelihoods[t][k]` is the emission density of observation `t` in state `k`.
pub fn enumerate_paths(
    likelihoods: &[Vec<f64>],
    transition: &TransitionMatrix<f64>,
    initial: &StateDistribution<f64>,
) -> Enumerated {
    let steps = likelihoods.len();
    let k = transition.states();
    let mut gamma = vec![vec![0.0; k]; steps];
    let mut xi = vec![vec![vec![0.0; k]; k]; steps.saturating_sub(1)];
    let mut total = 0.0;
    let mut path = vec![0usize; steps];
    let paths = k.pow(steps as u32);
    for code in 0..paths {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % k;
            c /= k;
        }
        let mut p = initial.probs()[path[0]] * likelihoods[0][path[0]];
        for t in 1..steps {
            p *= transition.get(path[t - 1], path[t]) * likelihoods[t][path[t]];
        }
        total += p;
        for t in 0..steps {
            gamma[t][path[t]] += p;
            if t + 1 < steps {
                xi[t][path[t]][path[t + 1]] += p;
            }
        }
    }
    for row in gamma.iter_mut() {
        row.iter_mut().for_each(|v| *v /= total);
    }
    for m in xi.iter_mut() {
        m.iter_mut().flatten().for_each(|v| *v /= total);
    }
    Enumerated {
        log_likelihood: total.ln(),
        gamma,
        xi,
    }
}

/// Solves `pi (A - I) = 0`, `sum pi = 1` by LU, replacing one balance
/// equation with the normalization.
pub fn stationary_by_solve(transition: &TransitionMatrix<f64>) -> Vec<f64> {
    let k = transition.states();
    let mut m = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            // row j of the system is the balance equation for state j
            m[(j, i)] = transition.get(i, j) - if i == j { 1.0 } else { 0.0 };
        }
    }
    let mut rhs = nalgebra::DVector::<f64>::zeros(k);
    for i in 0..k {
        m[(k - 1, i)] = 1.0;
    }
    rhs[k - 1] = 1.0;
    m.lu().solve(&rhs).expect("irreducible chain has a unique stationary distribution").iter().copied().collect()
}

/// Moduli of the eigenvalues of `A`, descending.
pub fn eigen_moduli(transition: &TransitionMatrix<f64>) -> Vec<f64> {
    let k = transition.states();
    let m = DMatrix::from_row_slice(k, k, transition.as_slice());
    let mut moduli: Vec<f64> = m.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    moduli
}

/// Adaptive Simpson integral of `f` over `[a, b]`, first split into `panels`
/// equal pieces so narrow features are not stepped over.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize, tol: f64) -> f64 {
    let h = (b - a) / panels as f64;
    let per = tol / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + i as f64 * h;
            let hi = if i + 1 == panels { b } else { lo + h };
            let (flo, fmid, fhi) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
            simpson(&f, lo, hi, flo, fmid, fhi, whole, per, 40)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

/// Residuals on both sides of zero with positive weights, for which the
/// side-constant solve is feasible at `q`. Draws until feasible.
pub fn random_feasible_emission<R: Rng>(q: f64, rng: &mut R) -> MqeEmission<f64> {
    loop {
        let n = rng.random_range(4..40);
        let spread = 0.2 + 3.0 * rng.random::<f64>();
        let centre = -spread * ptse_core::scalar::norm_quantile(q);
        let residuals: Vec<f64> = (0..n)
            .map(|_| centre + spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let gamma: Vec<f64> = (0..n).map(|_| 0.01 + rng.random::<f64>()).collect();
        let bandwidth = spread * (0.1 + 0.6 * rng.random::<f64>());
        if let Ok(e) = MqeEmission::fit(residuals, gamma, bandwidth, q) {
            if e.fallback().is_none() {
                return e;
            }
        }
    }
}

/// Direct weighted sum defining the emission density.
pub fn emission_pdf_by_sum(e: &MqeEmission<f64>, eps: f64) -> f64 {
    let s = e.bandwidth();
    let mut total = 0.0;
    for (r, g) in e.residuals().iter().zip(e.gamma()) {
        let w = if *r <= 0.0 { e.w_neg() } else { e.w_pos() };
        let z = (eps - r) / s;
        total += w * g * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    }
    total
}

/// Fixture in which member `k` is the exact `q`-quantile forecaster while
/// hidden regime `k` is active and is biased by `bias * s` otherwise.
///
/// The target is `10 + 3 sin(2 pi t / 24) + s z`, the regime follows a sticky
/// chain that leaves its state with probability `switch_prob`, and rows are
/// stamped hourly from 2024-01-01T00:00:00.
#[derive(Debug, Clone)]
pub struct RegimeFixture {
    pub members: usize,
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub q: f64,
    pub switch_prob: f64,
    pub bias: f64,
    pub noise: f64,
    pub seed: u64,
}

pub struct RegimeData {
    pub header: Vec<String>,
    pub timestamps: Vec<String>,
    pub regimes: Vec<usize>,
    pub targets: Vec<f64>,
    /// row-major `rows x members`
    pub predictions: Vec<f64>,
}

impl RegimeFixture {
    pub fn generate(&self) -> RegimeData {
        let mut rng = rng(self.seed);
        let rows = self.train_rows + self.holdout_rows;
        let k = self.members;
        let z_q = ptse_core::scalar::norm_quantile(self.q);
        let mut regime = rng.random_range(0..k);
        let mut data = RegimeData {
            header: std::iter::once("timestamp".to_owned())
                .chain(std::iter::once("y".to_owned()))
                .chain((0..k).map(|i| format!("m:{}", member_label(i))))
                .collect(),
            timestamps: Vec::with_capacity(rows),
            regimes: Vec::with_capacity(rows),
            targets: Vec::with_capacity(rows),
            predictions: Vec::with_capacity(rows * k),
        };
        for t in 0..rows {
            if t > 0 && rng.random::<f64>() < self.switch_prob {
                let step = rng.random_range(1..k.max(2));
                regime = (regime + step) % k;
            }
            let level = 10.0 + 3.0 * (2.0 * std::f64::consts::PI * t as f64 / 24.0).sin();
            let z: f64 = rng.sample(StandardNormal);
            let y = level + self.noise * z;
            let exact = level + self.noise * z_q;
            for i in 0..k {
                let jitter: f64 = rng.sample(StandardNormal);
                let offset = (i as f64 - regime as f64) * self.bias * self.noise * (1.0 + 0.05 * jitter);
                data.predictions.push(if i == regime { exact } else { exact + offset });
            }
            data.timestamps.push(hourly_timestamp(t));
            data.regimes.push(regime);
            data.targets.push(y);
        }
        data
    }
}

impl RegimeData {
    /// CSV text of rows `range`, values with six decimals.
    pub fn csv(&self, range: std::ops::Range<usize>) -> String {
        let k = self.header.len() - 2;
        let mut out = self.header.join(",");
        out.push('\n');
        for t in range {
            out.push_str(&self.timestamps[t]);
            out.push_str(&format!(",{:.6}", self.targets[t]));
            for i in 0..k {
                out.push_str(&format!(",{:.6}", self.predictions[t * k + i]));
            }
            out.push('\n');
        }
        out
    }
}

pub fn member_label(i: usize) -> String {
    ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
        .get(i)
        .map(|s| (*s).to_owned())
        .unwrap_or_else(|| format!("member{i}"))
}

pub fn hourly_timestamp(t: usize) -> String {
    // 2024 is a leap year; fixtures stay well inside it
    const DAYS: [usize; 12] = [31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];
    let (mut day, hour) = (t / 24, t % 24);
    let mut month = 0;
    while day >= DAYS[month] {
        day -= DAYS[month];
        month += 1;
    }
    format!("2024-{:02}-{:02}T{:02}:00:00", month + 1, day + 1, hour)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps_roll_over_months() {
        assert_eq!(hourly_timestamp(0), "2024-01-01T00:00:00");
        assert_eq!(hourly_timestamp(24 * 31), "2024-02-01T00:00:00");
        assert_eq!(hourly_timestamp(24 * 60 + 5), "2024-03-01T05:00:00");
    }

    #[test]
    fn simpson_integrates_gaussian() {
        let v = integrate(|x| (-0.5 * x * x).exp(), -12.0, 12.0, 24, 1e-13);
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-11);
    }

    #[test]
    fn linear_solve_two_state() {
        let a = TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        let p = stationary_by_solve(&a);
        assert!((p[0] - 0.75).abs() < 1e-14 && (p[1] - 0.25).abs() < 1e-14);
    }
}
