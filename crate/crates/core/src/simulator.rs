//! Synthetic Gaussian HMMs and the empirical-CDF convergence experiment.
//!
//! For a chain with stationary distribution `pi*` and Gaussian emissions, the
//! running fraction of observations at or below `tau` converges to
//! `sum_k pi*_k Phi((tau - mu_k) / s_k)` whatever the initial distribution.
//! The experiment draws many trajectories from random initial distributions
//! and records that running fraction at every step.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::hmm::{stationary_distribution, HmmError, StateDistribution, TransitionMatrix};
use crate::frame::TimeSeriesFrame;
use crate::scalar::{norm_cdf, norm_quantile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("need at least one state")]
    NoStates,
    #[error("need at least one time step")]
    NoSteps,
    #[error("need at least one replication")]
    NoReplications,
    #[error("{emissions} emission parameter pairs for {states} states")]
    EmissionCount { states: usize, emissions: usize },
    #[error("emission {0} has a non-positive or non-finite scale")]
    InvalidScale(usize),
    #[error("initial distribution has {got} states, expected {expected}")]
    InitialShape { got: usize, expected: usize },
    #[error(transparent)]
    Hmm(#[from] HmmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianEmission {
    pub mean: f64,
    pub std_dev: f64,
}

/// How the second parameter of `N(mu, x)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleReading {
    #[default]
    StdDev,
    Variance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub transition: TransitionMatrix<f64>,
    pub emissions: Vec<GaussianEmission>,
    pub steps: usize,
    pub replications: usize,
    pub tau: f64,
    pub seed: u64,
}

impl SimConfig {
    /// `K` states with a uniform-random transition matrix drawn from `seed`
    /// and emissions `N(0.2 k, sqrt(k) + 1)` for `k = 1..K`.
    pub fn gaussian_ladder(
        states: usize,
        steps: usize,
        replications: usize,
        tau: f64,
        seed: u64,
        reading: ScaleReading,
    ) -> Result<Self, SimError> {
        if states == 0 {
            return Err(SimError::NoStates);
        }
        let emissions = (1..=states)
            .map(|k| {
                let k = k as f64;
                let scale = k.sqrt() + 1.0;
                GaussianEmission {
                    mean: 0.2 * k,
                    std_dev: match reading {
                        ScaleReading::StdDev => scale,
                        ScaleReading::Variance => scale.sqrt(),
                    },
                }
            })
            .collect();
        let config = Self {
            transition: random_transition_matrix(states, seed),
            emissions,
            steps,
            replications,
            tau,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn states(&self) -> usize {
        self.transition.states()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.steps == 0 {
            return Err(SimError::NoSteps);
        }
        if self.replications == 0 {
            return Err(SimError::NoReplications);
        }
        if self.emissions.len() != self.states() {
            return Err(SimError::EmissionCount {
                states: self.states(),
                emissions: self.emissions.len(),
            });
        }
        if let Some(i) = self
            .emissions
            .iter()
            .position(|e| !(e.std_dev > 0.0) || !e.std_dev.is_finite() || !e.mean.is_finite())
        {
            return Err(SimError::InvalidScale(i));
        }
        Ok(())
    }

    /// `sum_k pi*_k Phi((tau - mu_k) / s_k)` at the stationary distribution.
    pub fn limit_cdf(&self, stationary: &StateDistribution<f64>, tau: f64) -> f64 {
        stationary
            .probs()
            .iter()
            .zip(&self.emissions)
            .map(|(p, e)| p * norm_cdf((tau - e.mean) / e.std_dev))
            .sum()
    }
}

/// I.i.d. uniform(0, 1) entries, each row normalized to sum to one.
pub fn random_transition_matrix(states: usize, seed: u64) -> TransitionMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..states * states)
        .map(|_| {
            // open interval keeps every entry strictly positive
            let u: f64 = rng.random();
            if u > 0.0 {
                u
            } else {
                f64::MIN_POSITIVE
            }
        })
        .collect();
    TransitionMatrix::normalized_rows(states, raw).0
}

/// Point on the simplex from normalized i.i.d. exponentials (uniform on the
/// simplex).
pub fn random_distribution<R: Rng + ?Sized>(states: usize, rng: &mut R) -> StateDistribution<f64> {
    let raw: Vec<f64> = (0..states).map(|_| rng.sample::<f64, _>(Exp1) + f64::MIN_POSITIVE).collect();
    StateDistribution::normalized(raw).expect("exponential draws are positive")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub states: Vec<usize>,
    pub observations: Vec<f64>,
}

pub fn sample_hmm(config: &SimConfig, initial: &StateDistribution<f64>, seed: u64) -> Result<SampledPath, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_hmm_with_rng(config, initial, &mut rng)
}

pub fn sample_hmm_with_rng<R: Rng + ?Sized>(
    config: &SimConfig,
    initial: &StateDistribution<f64>,
    rng: &mut R,
) -> Result<SampledPath, SimError> {
    config.validate()?;
    if initial.states() != config.states() {
        return Err(SimError::InitialShape {
            got: initial.states(),
            expected: config.states(),
        });
    }
    let mut states = Vec::with_capacity(config.steps);
    let mut observations = Vec::with_capacity(config.steps);
    let mut s = draw_categorical(initial.probs(), rng);
    for t in 0..config.steps {
        if t > 0 {
            s = draw_categorical(config.transition.row(s), rng);
        }
        let e = config.emissions[s];
        let z: f64 = rng.sample(StandardNormal);
        states.push(s);
        observations.push(e.mean + e.std_dev * z);
    }
    Ok(SampledPath { states, observations })
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the last partial sum: take the last state with mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Training data in which member `k` always predicts the `q`-quantile of
/// state `k`'s emission, `mu_k + s_k z_q`, and the target follows the chain
/// started from its stationary distribution.
///
/// When state `k` is active, member `k`'s residual has its `q`-quantile at
/// zero, so the generating chain is the ground truth for a fit. Members are
/// labelled `s1..sK`. The path is drawn from stream `u64::MAX` of `seed`, apart
/// from the streams used by the transition-matrix draw and the replications.
pub fn constant_member_frame(
    config: &SimConfig,
    q: f64,
    seed: u64,
) -> Result<(TimeSeriesFrame<f64>, SampledPath, StateDistribution<f64>), SimError> {
    config.validate()?;
    let k = config.states();
    let stationary = stationary_distribution(&config.transition, &StateDistribution::uniform(k))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let path = sample_hmm_with_rng(config, &stationary, &mut rng)?;
    let z = norm_quantile(q);
    let member_row: Vec<f64> = config.emissions.iter().map(|e| e.mean + e.std_dev * z).collect();
    let predictions = member_row
        .iter()
        .copied()
        .cycle()
        .take(k * config.steps)
        .collect();
    let names = (1..=k).map(|i| format!("s{i}")).collect();
    let frame = TimeSeriesFrame::with_index(path.observations.clone(), predictions, names, q)
        .map_err(|_| SimError::NoSteps)?;
    Ok((frame, path, stationary))
}

/// Running empirical CDFs of every replication and their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub config: SimConfig,
    pub stationary: StateDistribution<f64>,
    /// `sum_k pi*_k Phi((tau - mu_k) / s_k)`.
    pub limit: f64,
    /// `trajectories[r][t - 1]` is the fraction of the first `t` observations
    /// of replication `r` at or below `tau`.
    pub trajectories: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Pointwise 95% normal confidence band of the mean.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConvergenceReport {
    /// `|mean_r F_T(tau) - limit|` at the last step.
    pub fn terminal_gap(&self) -> f64 {
        (self.mean.last().copied().unwrap_or(f64::NAN) - self.limit).abs()
    }

    /// Largest `|mean_r F_t(tau) - limit|` over `t >= from_step` (1-based).
    pub fn max_gap_from(&self, from_step: usize) -> f64 {
        self.mean
            .iter()
            .skip(from_step.saturating_sub(1))
            .map(|m| (m - self.limit).abs())
            .fold(0.0, f64::max)
    }

    /// Long-format CSV: `replication,t,empirical_cdf`.
    pub fn write_trajectories_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "replication,t,empirical_cdf")?;
        for (r, traj) in self.trajectories.iter().enumerate() {
            for (i, v) in traj.iter().enumerate() {
                writeln!(out, "{},{},{}", r, i + 1, v)?;
            }
        }
        Ok(())
    }

    /// `t,mean,lower,upper,limit` per step.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,mean,lower,upper,limit")?;
        for i in 0..self.mean.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                self.mean[i],
                self.lower[i],
                self.upper[i],
                self.limit
            )?;
        }
        Ok(())
    }

    /// JSON sidecar with the limit, the stationary distribution and an echo
    /// of the configuration.
    pub fn sidecar_json(&self) -> String {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            format: &'static str,
            version: u32,
            seed: u64,
            states: usize,
            steps: usize,
            replications: usize,
            tau: f64,
            limit: f64,
            stationary: &'a [f64],
            transition: Vec<Vec<f64>>,
            emissions: &'a [GaussianEmission],
            terminal_gap: f64,
            max_gap_from_step_50: f64,
        }
        let c = &self.config;
        let doc = Sidecar {
            format: "ptse-simulation",
            version: 1,
            seed: c.seed,
            states: c.states(),
            steps: c.steps,
            replications: c.replications,
            tau: c.tau,
            limit: self.limit,
            stationary: self.stationary.probs(),
            transition: c.transition.rows(),
            emissions: &c.emissions,
            terminal_gap: self.terminal_gap(),
            max_gap_from_step_50: self.max_gap_from(50),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("sidecar serializes");
        s.push('\n');
        s
    }
}

/// Generator for replication `r`: the master seed with stream `r + 1`
/// (stream 0 is left to the transition-matrix draw).
pub fn replication_rng(seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64 + 1);
    rng
}

pub fn run_convergence_experiment(config: &SimConfig) -> Result<ConvergenceReport, SimError> {
    config.validate()?;
    let k = config.states();
    let stationary = stationary_distribution(&config.transition, &StateDistribution::uniform(k))?;
    let limit = config.limit_cdf(&stationary, config.tau);

    let trajectories: Vec<Vec<f64>> = (0..config.replications)
        .map(|r| {
            let mut rng = replication_rng(config.seed, r);
            let initial = random_distribution(k, &mut rng);
            let path = sample_hmm_with_rng(config, &initial, &mut rng)?;
            let mut below = 0usize;
            Ok(path
                .observations
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    if *o <= config.tau {
                        below += 1;
                    }
                    below as f64 / (i + 1) as f64
                })
                .collect())
        })
        .collect::<Result<_, SimError>>()?;

    let reps = config.replications as f64;
    let mut mean = vec![0.0; config.steps];
    let mut lower = vec![0.0; config.steps];
    let mut upper = vec![0.0; config.steps];
    for t in 0..config.steps {
        let m = trajectories.iter().map(|tr| tr[t]).sum::<f64>() / reps;
        let var = if config.replications > 1 {
            trajectories.iter().map(|tr| (tr[t] - m).powi(2)).sum::<f64>() / (reps - 1.0)
        } else {
            0.0
        };
        let half = 1.96 * (var / reps).sqrt();
        mean[t] = m;
        lower[t] = m - half;
        upper[t] = m + half;
    }
    Ok(ConvergenceReport {
        config: config.clone(),
        stationary,
        limit,
        trajectories,
        mean,
        lower,
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn one_state_matrix() {
        assert_eq!(random_transition_matrix(1, 3).as_slice(), &[1.0]);
    }

    #[test]
    fn random_matrices_are_positive_and_reproducible() {
        for k in 1..8 {
            let a = random_transition_matrix(k, 11);
            assert!(a.as_slice().iter().all(|v| *v > 0.0));
            for i in 0..k {
                assert_abs_diff_eq!(a.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
            assert_eq!(a, random_transition_matrix(k, 11));
        }
        assert_ne!(random_transition_matrix(3, 1), random_transition_matrix(3, 2));
    }

    #[test]
    fn absorbing_chain_stays_put() {
        let config = SimConfig {
            transition: TransitionMatrix::identity(2),
            emissions: vec![
                GaussianEmission { mean: 1.0, std_dev: 1e-12 },
                GaussianEmission { mean: 5.0, std_dev: 1.0 },
            ],
            steps: 500,
            replications: 1,
            tau: 0.0,
            seed: 4,
        };
        let path = sample_hmm(&config, &StateDistribution::new(vec![1.0, 0.0]).unwrap(), 9).unwrap();
        assert!(path.states.iter().all(|s| *s == 0));
        for o in &path.observations {
            assert_abs_diff_eq!(*o, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn ladder_parameters() {
        let c = SimConfig::gaussian_ladder(3, 10, 2, 0.5, 1, ScaleReading::StdDev).unwrap();
        assert_abs_diff_eq!(c.emissions[2].mean, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(c.emissions[3 - 1].std_dev, 3f64.sqrt() + 1.0, epsilon = 1e-15);
        let v = SimConfig::gaussian_ladder(3, 10, 2, 0.5, 1, ScaleReading::Variance).unwrap();
        assert_abs_diff_eq!(v.emissions[0].std_dev, 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert_eq!(
            SimConfig::gaussian_ladder(0, 10, 1, 0.0, 0, ScaleReading::StdDev).unwrap_err(),
            SimError::NoStates
        );
        assert_eq!(
            SimConfig::gaussian_ladder(2, 0, 1, 0.0, 0, ScaleReading::StdDev).unwrap_err(),
            SimError::NoSteps
        );
        assert_eq!(
            SimConfig::gaussian_ladder(2, 5, 0, 0.0, 0, ScaleReading::StdDev).unwrap_err(),
            SimError::NoReplications
        );
    }

    #[test]
    fn trajectories_are_probabilities() {
        let c = SimConfig::gaussian_ladder(3, 200, 5, 0.5, 2, ScaleReading::StdDev).unwrap();
        let rep = run_convergence_experiment(&c).unwrap();
        assert_eq!(rep.trajectories.len(), 5);
        for tr in &rep.trajectories {
            assert_eq!(tr.len(), 200);
            assert!(tr.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut csv = Vec::new();
        rep.write_trajectories_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("replication,t,empirical_cdf\n0,1,"));
        assert_eq!(text.lines().count(), 1 + 5 * 200);
    }
}
