//! Markov-chain algebra and the scaled forward/backward pass.
//!
//! All tables are stored row-major in flat vectors. The forward and backward
//! variables are normalized at every step by the forward mass `c_t`, so the
//! pass stays finite for arbitrarily long sequences and the data
//! log-likelihood is recovered as `sum_t ln c_t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{from_usize, lit, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HmmError {
    #[error("transition matrix must be square and non-empty: got {len} entries for {states} states")]
    Shape { states: usize, len: usize },
    #[error("row {row} of the transition matrix is not a probability vector (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
    #[error("state distribution is not a probability vector (sum {sum})")]
    NotDistribution { sum: f64 },
    #[error("dimension mismatch: {what} has {got} states, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("at least two observations are required, got {0}")]
    TooShort(usize),
    #[error("emission likelihood table has a non-finite or negative entry at t={t}, state {state}")]
    InvalidLikelihood { t: usize, state: usize },
    #[error("every state assigns zero likelihood to observation t={t}")]
    DegenerateLikelihood { t: usize },
    #[error("power iteration did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },
}

/// Row-stochastic `K x K` matrix; entry `(i, j)` is the probability of moving
/// from state `i` to state `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix<T> {
    states: usize,
    entries: Vec<T>,
}

impl<T: Real> TransitionMatrix<T> {
    pub fn new(states: usize, entries: Vec<T>) -> Result<Self, HmmError> {
        if states == 0 || entries.len() != states * states {
            return Err(HmmError::Shape {
                states,
                len: entries.len(),
            });
        }
        let m = Self { states, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, HmmError> {
        let states = rows.len();
        let entries: Vec<T> = rows.iter().flatten().copied().collect();
        Self::new(states, entries)
    }

    /// Every row equal to the uniform distribution.
    pub fn uniform(states: usize) -> Self {
        let p = T::one() / from_usize(states);
        Self {
            states,
            entries: vec![p; states * states],
        }
    }

    pub fn identity(states: usize) -> Self {
        let mut entries = vec![T::zero(); states * states];
        for i in 0..states {
            entries[i * states + i] = T::one();
        }
        Self { states, entries }
    }

    /// Normalizes each row of a nonnegative matrix. Rows with zero mass are
    /// replaced by the uniform row; their indices are returned.
    pub fn normalized_rows(states: usize, mut raw: Vec<T>) -> (Self, Vec<usize>) {
        assert_eq!(raw.len(), states * states);
        let mut reset = Vec::new();
        let uniform = T::one() / from_usize(states);
        for (i, row) in raw.chunks_mut(states).enumerate() {
            let total: T = row.iter().copied().sum();
            if total > T::zero() && total.is_finite() {
                row.iter_mut().for_each(|v| *v = *v / total);
            } else {
                row.iter_mut().for_each(|v| *v = uniform);
                reset.push(i);
            }
        }
        (
            Self {
                states,
                entries: raw,
            },
            reset,
        )
    }

    fn validate(&self) -> Result<(), HmmError> {
        for (row_idx, row) in self.entries.chunks(self.states).enumerate() {
            let sum: T = row.iter().copied().sum();
            let bad_entry = row.iter().any(|v| !v.is_finite() || *v < T::zero());
            if bad_entry || (sum - T::one()).abs() > T::stochastic_tol() {
                return Err(HmmError::NotStochastic {
                    row: row_idx,
                    sum: sum.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }

    pub fn states(&self) -> usize {
        self.states
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> T {
        self.entries[from * self.states + to]
    }

    pub fn row(&self, from: usize) -> &[T] {
        &self.entries[from * self.states..(from + 1) * self.states]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        self.entries.chunks(self.states).map(<[T]>::to_vec).collect()
    }

    /// Matrix product `self * other`.
    pub fn compose(&self, other: &Self) -> Self {
        let k = self.states;
        let mut out = vec![T::zero(); k * k];
        for i in 0..k {
            for l in 0..k {
                let a = self.get(i, l);
                if a == T::zero() {
                    continue;
                }
                for j in 0..k {
                    out[i * k + j] = out[i * k + j] + a * other.get(l, j);
                }
            }
        }
        Self {
            states: k,
            entries: out,
        }
    }

    /// Row vector times matrix: `p A`.
    pub fn left_apply(&self, p: &[T]) -> Vec<T> {
        let k = self.states;
        let mut out = vec![T::zero(); k];
        for (i, &pi) in p.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + pi * a;
            }
        }
        out
    }

    /// Same chain with states relabelled: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.states;
        let mut entries = vec![T::zero(); k * k];
        for i in 0..k {
            for j in 0..k {
                entries[i * k + j] = self.get(perm[i], perm[j]);
            }
        }
        Self { states: k, entries }
    }
}

/// Probability vector over hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDistribution<T> {
    probs: Vec<T>,
}

impl<T: Real> StateDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self, HmmError> {
        let sum: T = probs.iter().copied().sum();
        let bad = probs.iter().any(|v| !v.is_finite() || *v < T::zero());
        if probs.is_empty() || bad || (sum - T::one()).abs() > T::stochastic_tol() {
            return Err(HmmError::NotDistribution {
                sum: sum.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { probs })
    }

    pub fn uniform(states: usize) -> Self {
        Self {
            probs: vec![T::one() / from_usize(states); states],
        }
    }

    /// Normalizes a nonnegative vector with positive mass.
    pub fn normalized(mut raw: Vec<T>) -> Result<Self, HmmError> {
        let sum: T = raw.iter().copied().sum();
        if !(sum > T::zero()) || !sum.is_finite() {
            return Err(HmmError::NotDistribution {
                sum: sum.to_f64().unwrap_or(f64::NAN),
            });
        }
        raw.iter_mut().for_each(|v| *v = *v / sum);
        Self::new(raw)
    }

    pub fn states(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<T> {
        self.probs
    }
}

/// `T x K` table of emission densities: entry `(t, k)` is the density state
/// `k` assigns to observation `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodTable<T> {
    steps: usize,
    states: usize,
    values: Vec<T>,
}

impl<T: Real> LikelihoodTable<T> {
    pub fn new(steps: usize, states: usize, values: Vec<T>) -> Result<Self, HmmError> {
        assert_eq!(values.len(), steps * states, "likelihood table shape");
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < T::zero()) {
            return Err(HmmError::InvalidLikelihood {
                t: pos / states,
                state: pos % states,
            });
        }
        Ok(Self {
            steps,
            states,
            values,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn states(&self) -> usize {
        self.states
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> T {
        self.values[t * self.states + k]
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.values[t * self.states..(t + 1) * self.states]
    }
}

/// Smoothed posteriors from one forward/backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors<T> {
    steps: usize,
    states: usize,
    gamma: Vec<T>,
    xi: Vec<T>,
    log_likelihood: T,
}

impl<T: Real> Posteriors<T> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn states(&self) -> usize {
        self.states
    }

    /// Probability of occupying state `k` at time `t`.
    #[inline]
    pub fn gamma(&self, t: usize, k: usize) -> T {
        self.gamma[t * self.states + k]
    }

    pub fn gamma_row(&self, t: usize) -> &[T] {
        &self.gamma[t * self.states..(t + 1) * self.states]
    }

    /// Column of gamma for one state, over all time steps.
    pub fn gamma_column(&self, k: usize) -> Vec<T> {
        (0..self.steps).map(|t| self.gamma(t, k)).collect()
    }

    /// Probability of being in `i` at `t` and in `j` at `t + 1`, for
    /// `t < steps - 1`.
    #[inline]
    pub fn xi(&self, t: usize, i: usize, j: usize) -> T {
        let k = self.states;
        self.xi[(t * k + i) * k + j]
    }

    pub fn log_likelihood(&self) -> T {
        self.log_likelihood
    }
}

/// Scaled forward/backward pass.
pub fn forward_backward<T: Real>(
    likelihoods: &LikelihoodTable<T>,
    transition: &TransitionMatrix<T>,
    initial: &StateDistribution<T>,
) -> Result<Posteriors<T>, HmmError> {
    let (scaled_alpha, scales) = scaled_forward(likelihoods, transition, initial)?;
    let steps = likelihoods.steps();
    let k = likelihoods.states();

    let mut beta = vec![T::zero(); steps * k];
    beta[(steps - 1) * k..].iter_mut().for_each(|b| *b = T::one());
    let mut weighted = vec![T::zero(); k];
    for t in (0..steps - 1).rev() {
        let next = t + 1;
        for (j, w) in weighted.iter_mut().enumerate() {
            *w = likelihoods.get(next, j) * beta[next * k + j];
        }
        let c = scales[next];
        for i in 0..k {
            let s: T = transition
                .row(i)
                .iter()
                .zip(&weighted)
                .map(|(&a, &w)| a * w)
                .sum();
            beta[t * k + i] = s / c;
        }
    }

    let mut gamma = vec![T::zero(); steps * k];
    for t in 0..steps {
        let row = &mut gamma[t * k..(t + 1) * k];
        for (i, g) in row.iter_mut().enumerate() {
            *g = scaled_alpha[t * k + i] * beta[t * k + i];
        }
        normalize_in_place(row);
    }

    let mut xi = vec![T::zero(); (steps - 1) * k * k];
    for t in 0..steps - 1 {
        let next = t + 1;
        let block = &mut xi[t * k * k..(t + 1) * k * k];
        for i in 0..k {
            let a_i = scaled_alpha[t * k + i];
            for j in 0..k {
                block[i * k + j] = a_i
                    * transition.get(i, j)
                    * likelihoods.get(next, j)
                    * beta[next * k + j];
            }
        }
        normalize_in_place(block);
    }

    let log_likelihood = scales.iter().map(|c| c.ln()).sum();
    Ok(Posteriors {
        steps,
        states: k,
        gamma,
        xi,
        log_likelihood,
    })
}

/// Data log-likelihood from the scaled forward recursion alone.
pub fn log_likelihood<T: Real>(
    likelihoods: &LikelihoodTable<T>,
    transition: &TransitionMatrix<T>,
    initial: &StateDistribution<T>,
) -> Result<T, HmmError> {
    let (_, scales) = scaled_forward(likelihoods, transition, initial)?;
    Ok(scales.iter().map(|c| c.ln()).sum())
}

fn scaled_forward<T: Real>(
    likelihoods: &LikelihoodTable<T>,
    transition: &TransitionMatrix<T>,
    initial: &StateDistribution<T>,
) -> Result<(Vec<T>, Vec<T>), HmmError> {
    let steps = likelihoods.steps();
    let k = likelihoods.states();
    check_dims(k, transition.states(), "transition matrix")?;
    check_dims(k, initial.states(), "initial distribution")?;
    if steps < 2 {
        return Err(HmmError::TooShort(steps));
    }
    if let Some(t) = (0..steps).find(|&t| likelihoods.row(t).iter().all(|v| *v == T::zero())) {
        return Err(HmmError::DegenerateLikelihood { t });
    }

    let mut alpha = vec![T::zero(); steps * k];
    let mut scales = vec![T::zero(); steps];
    for (i, a) in alpha[..k].iter_mut().enumerate() {
        *a = initial.probs()[i] * likelihoods.get(0, i);
    }
    scales[0] = scale_row(&mut alpha[..k], 0)?;

    for t in 1..steps {
        let (done, rest) = alpha.split_at_mut(t * k);
        let prev = &done[(t - 1) * k..];
        let cur = &mut rest[..k];
        cur.iter_mut().for_each(|v| *v = T::zero());
        for (i, &p) in prev.iter().enumerate() {
            for (c, &a) in cur.iter_mut().zip(transition.row(i)) {
                *c = *c + p * a;
            }
        }
        for (j, c) in cur.iter_mut().enumerate() {
            *c = *c * likelihoods.get(t, j);
        }
        scales[t] = scale_row(cur, t)?;
    }
    Ok((alpha, scales))
}

fn scale_row<T: Real>(row: &mut [T], t: usize) -> Result<T, HmmError> {
    let c: T = row.iter().copied().sum();
    if !(c > T::zero()) || !c.is_finite() {
        return Err(HmmError::DegenerateLikelihood { t });
    }
    row.iter_mut().for_each(|v| *v = *v / c);
    Ok(c)
}

fn normalize_in_place<T: Real>(values: &mut [T]) {
    let s: T = values.iter().copied().sum();
    if s > T::zero() {
        values.iter_mut().for_each(|v| *v = *v / s);
    }
}

fn check_dims(expected: usize, got: usize, what: &'static str) -> Result<(), HmmError> {
    if expected != got {
        return Err(HmmError::DimensionMismatch {
            what,
            got,
            expected,
        });
    }
    Ok(())
}

/// Re-estimated transition matrix plus the states whose rows were reset to
/// uniform because they carried no posterior mass.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionUpdate<T> {
    pub matrix: TransitionMatrix<T>,
    pub starved_states: Vec<usize>,
}

/// Expected transition counts over expected departures, summed over
/// `t = 1..T-1`.
pub fn update_transition<T: Real>(posteriors: &Posteriors<T>) -> TransitionUpdate<T> {
    let k = posteriors.states();
    let mut counts = vec![T::zero(); k * k];
    let mut departures = vec![T::zero(); k];
    for t in 0..posteriors.steps() - 1 {
        for i in 0..k {
            departures[i] = departures[i] + posteriors.gamma(t, i);
            for j in 0..k {
                counts[i * k + j] = counts[i * k + j] + posteriors.xi(t, i, j);
            }
        }
    }
    let starve_floor: T = lit::<T>(1e-300).max(T::min_positive_value());
    let uniform = T::one() / from_usize(k);
    let mut starved = Vec::new();
    for i in 0..k {
        let row = &mut counts[i * k..(i + 1) * k];
        if departures[i] < starve_floor {
            row.iter_mut().for_each(|v| *v = uniform);
            starved.push(i);
        }
    }
    // Divide by the row's own total so the result is stochastic to rounding;
    // it agrees with the gamma denominator because sum_j xi_ij(t) = gamma_i(t).
    let (matrix, _) = TransitionMatrix::normalized_rows(k, counts);
    TransitionUpdate {
        matrix,
        starved_states: starved,
    }
}

/// Initial distribution re-estimate: the first row of gamma.
pub fn update_initial<T: Real>(posteriors: &Posteriors<T>) -> StateDistribution<T> {
    StateDistribution::normalized(posteriors.gamma_row(0).to_vec())
        .expect("gamma rows are probability vectors")
}

pub const STATIONARY_MAX_ITERS: usize = 1_000_000;

/// Stationary distribution by the fixed-point iteration `p <- p A` started
/// from `initial`, with the type's default tolerance and iteration cap.
pub fn stationary_distribution<T: Real>(
    transition: &TransitionMatrix<T>,
    initial: &StateDistribution<T>,
) -> Result<StateDistribution<T>, HmmError> {
    stationary_distribution_with(transition, initial, T::stationary_tol(), STATIONARY_MAX_ITERS)
}

pub fn stationary_distribution_with<T: Real>(
    transition: &TransitionMatrix<T>,
    initial: &StateDistribution<T>,
    tol: T,
    max_iters: usize,
) -> Result<StateDistribution<T>, HmmError> {
    check_dims(transition.states(), initial.states(), "initial distribution")?;
    let mut p = initial.probs().to_vec();
    let mut residual = stationary_residual(transition, &p);
    let mut iterations = 0;
    while residual > tol {
        if iterations == max_iters {
            return Err(HmmError::NoConvergence {
                iterations,
                residual: residual.to_f64().unwrap_or(f64::NAN),
                last: p.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
            });
        }
        p = transition.left_apply(&p);
        normalize_in_place(&mut p);
        residual = stationary_residual(transition, &p);
        iterations += 1;
    }
    StateDistribution::new(p)
}

/// `max_j |(p A)_j - p_j|`.
pub fn stationary_residual<T: Real>(transition: &TransitionMatrix<T>, p: &[T]) -> T {
    transition
        .left_apply(p)
        .iter()
        .zip(p)
        .map(|(a, b)| (*a - *b).abs())
        .fold(T::zero(), T::max)
}

/// Frobenius distance between `A^t` and the rank-one limit `1 pi*`, for
/// `t = 1..=t_max`.
///
/// `pi*` is taken from the power iteration started at the uniform
/// distribution; if that fails to converge the last iterate is used.
pub fn frobenius_decay<T: Real>(transition: &TransitionMatrix<T>, t_max: usize) -> Vec<(usize, T)> {
    let k = transition.states();
    let limit = match stationary_distribution(transition, &StateDistribution::uniform(k)) {
        Ok(p) => p.into_vec(),
        Err(HmmError::NoConvergence { last, .. }) => last.into_iter().map(lit).collect(),
        Err(e) => panic!("unexpected error from stationary iteration: {e}"),
    };
    let mut power = transition.clone();
    let mut out = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let dist = power
            .as_slice()
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let d = v - limit[idx % k];
                d * d
            })
            .sum::<T>()
            .sqrt();
        out.push((t, dist));
        power = power.compose(transition);
    }
    out
}
