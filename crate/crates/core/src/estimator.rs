//! Baum-Welch fitting with constrained KDE emissions.
//!
//! Hidden state `k` means "member `k` is the best description of `y_t`"; its
//! emission density is the member's residual density with the `q`-quantile
//! pinned at zero. Each iteration re-estimates the chain from the smoothed
//! posteriors, then rebuilds every member's emission from its residuals
//! weighted by that member's posterior occupancy, re-selecting the bandwidth
//! by bootstrap.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::frame::{FrameError, TimeSeriesFrame};
use crate::hmm::{
    self, forward_backward, stationary_distribution_with, update_initial, update_transition,
    HmmError, LikelihoodTable, Posteriors, StateDistribution, TransitionMatrix,
};
use crate::model::EnsembleModel;
use crate::mqe::{build_residuals, ConstraintFallback, MqeEmission, MqeError, ResidualMatrix};
use crate::scalar::{from_usize, lit, Real};
use crate::wkde::{self, select_bandwidth_with_rng, KdeError, WeightedSample};

#[derive(Debug, Clone, PartialEq)]
pub enum CandidateGrid {
    /// `count` log-spaced multiples of the pilot bandwidth between
    /// `lo_factor` and `hi_factor`.
    Relative {
        count: usize,
        lo_factor: f64,
        hi_factor: f64,
    },
    /// Absolute bandwidths, ascending.
    Fixed(Vec<f64>),
}

impl Default for CandidateGrid {
    fn default() -> Self {
        CandidateGrid::Relative {
            count: wkde::DEFAULT_CANDIDATES,
            lo_factor: 1.0 / 8.0,
            hi_factor: 8.0,
        }
    }
}

impl CandidateGrid {
    fn resolve<T: Real>(&self, pilot: T) -> Vec<T> {
        match self {
            CandidateGrid::Relative {
                count,
                lo_factor,
                hi_factor,
            } => wkde::log_spaced(pilot * lit(*lo_factor), pilot * lit(*hi_factor), *count),
            CandidateGrid::Fixed(values) => values.iter().map(|v| lit(*v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop once the log-likelihood moves less than this (nats) ...
    pub loglik_tol: f64,
    /// ... and no entry of `A`, `pi` or any bandwidth moves more than this.
    pub param_tol: f64,
    pub candidates: CandidateGrid,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    pub pi_star_tol: f64,
    /// Keep bandwidths fixed after this many iterations.
    pub freeze_bandwidth_after: Option<usize>,
    /// Keep emissions fixed after this many iterations; `Some(0)` keeps the
    /// initial emissions throughout.
    pub freeze_emissions_after: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            loglik_tol: 1e-6,
            param_tol: 1e-5,
            candidates: CandidateGrid::default(),
            bootstrap_resamples: wkde::DEFAULT_RESAMPLES,
            seed: 0,
            pi_star_tol: 1e-12,
            freeze_bandwidth_after: None,
            freeze_emissions_after: None,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::InvalidConfig(m.to_owned()));
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.loglik_tol > 0.0 && self.param_tol > 0.0 && self.pi_star_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.bootstrap_resamples == 0 {
            return bad("bootstrap_resamples must be at least 1");
        }
        match &self.candidates {
            CandidateGrid::Relative {
                count,
                lo_factor,
                hi_factor,
            } => {
                if *count == 0 || !(*lo_factor > 0.0) || !(hi_factor >= lo_factor) {
                    return bad("relative candidate grid needs count >= 1 and 0 < lo <= hi");
                }
            }
            CandidateGrid::Fixed(v) => {
                if v.is_empty() || v.iter().any(|x| !(*x > 0.0)) || v.windows(2).any(|w| w[0] > w[1]) {
                    return bad("fixed candidates must be positive and ascending");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Residuals(#[from] MqeError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Bandwidth(#[from] KdeError),
    #[error("emission density for member {member} is not finite at row {row} (iteration {iteration})")]
    NonFiniteLikelihood {
        iteration: usize,
        member: String,
        row: usize,
        trace: Vec<f64>,
    },
    #[error("{what}: model has {model}, series has {series}")]
    ShapeMismatch {
        what: &'static str,
        model: String,
        series: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WarningKind {
    /// Fewer than `2K` rows.
    SmallSample,
    /// Emission densities below the floor were raised to it.
    FlooredLikelihoods,
    /// The zero-quantile constraint was dropped for a member.
    ConstraintDropped(ConstraintFallback),
    /// A member's state carried no posterior mass; its emission was kept.
    StarvedMember,
    /// A state had no outgoing mass; its transition row was reset to uniform.
    StarvedTransitionRow,
    /// Weighted residuals had no spread; the bandwidth was left unchanged.
    DegenerateResiduals,
    /// `max_iters` was reached before the stopping rule was met.
    NoConvergence,
}

/// One warning, reported once however many iterations raised it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitWarning {
    pub kind: WarningKind,
    pub member: Option<String>,
    pub first_iteration: usize,
    pub occurrences: usize,
}

impl fmt::Display for FitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let who = self.member.as_deref().map(|m| format!("member {m}: ")).unwrap_or_default();
        let what = match self.kind {
            WarningKind::SmallSample => "fewer than 2K training rows".to_owned(),
            WarningKind::FlooredLikelihoods => {
                format!("{} emission likelihoods raised to the floor", self.occurrences)
            }
            WarningKind::ConstraintDropped(reason) => format!(
                "zero-quantile constraint dropped ({}), plain weighted KDE used",
                match reason {
                    ConstraintFallback::OneSidedResiduals => "residuals on one side of zero",
                    ConstraintFallback::NegativeWeight => "no nonnegative solution",
                    ConstraintFallback::SingularSystem => "singular system",
                }
            ),
            WarningKind::StarvedMember => "no posterior mass, emission kept".to_owned(),
            WarningKind::StarvedTransitionRow => "transition row reset to uniform".to_owned(),
            WarningKind::DegenerateResiduals => "weighted residuals have no spread, bandwidth kept".to_owned(),
            WarningKind::NoConvergence => "stopping rule not met within max_iters".to_owned(),
        };
        let span = if self.kind == WarningKind::FlooredLikelihoods {
            String::new()
        } else if self.occurrences > 1 {
            format!(" (iteration {} onward, {} times)", self.first_iteration, self.occurrences)
        } else {
            format!(" (iteration {})", self.first_iteration)
        };
        write!(f, "{who}{what}{span}")
    }
}

#[derive(Debug, Default)]
struct WarningLog {
    entries: Vec<FitWarning>,
}

impl WarningLog {
    fn note(&mut self, kind: WarningKind, member: Option<&str>, iteration: usize, count: usize) {
        if count == 0 {
            return;
        }
        if let Some(w) = self
            .entries
            .iter_mut()
            .find(|w| w.kind == kind && w.member.as_deref() == member)
        {
            w.occurrences += count;
        } else {
            self.entries.push(FitWarning {
                kind,
                member: member.map(str::to_owned),
                first_iteration: iteration,
                occurrences: count,
            });
        }
    }
}

/// A fitted model together with how the fit went.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome<T> {
    pub model: EnsembleModel<T>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<FitWarning>,
}

struct Params<T> {
    transition: TransitionMatrix<T>,
    initial: StateDistribution<T>,
    emissions: Vec<MqeEmission<T>>,
}

/// Runs the EM loop to convergence or `config.max_iters`.
///
/// The result is a pure function of `(series, config)`: bootstrap draws for
/// member `k` come from a ChaCha stream keyed by the member label and replayed
/// every iteration, so relabelling or reordering members permutes the fit.
pub fn fit<T: Real>(series: &TimeSeriesFrame<T>, config: &FitConfig) -> Result<FitOutcome<T>, FitError> {
    config.validate()?;
    let residuals = build_residuals(series)?;
    let k = series.members();
    let steps = series.len();
    let q = series.q();
    let names = series.member_names();
    let mut log = WarningLog::default();
    if steps < 2 * k {
        log.note(WarningKind::SmallSample, None, 0, 1);
    }

    let uniform_gamma = vec![T::one() / from_usize(k); steps];
    let emissions = (0..k)
        .map(|m| {
            let column = residuals.column(m);
            let bandwidth = WeightedSample::unweighted(column.clone())?
                .silverman_bandwidth()
                .unwrap_or_else(|| fallback_bandwidth(&column));
            let e = MqeEmission::fit(column, uniform_gamma.clone(), bandwidth, q)?;
            if let Some(reason) = e.fallback() {
                log.note(WarningKind::ConstraintDropped(reason), Some(&names[m]), 0, 1);
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>, FitError>>()?;
    let mut params = Params {
        transition: TransitionMatrix::uniform(k),
        initial: StateDistribution::uniform(k),
        emissions,
    };

    let mut trace: Vec<T> = Vec::new();
    let mut posteriors = expectation(&residuals, &params, names, 0, &trace, &mut log)?;
    trace.push(posteriors.log_likelihood());

    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let iteration = iterations;
        let update = update_transition(&posteriors);
        for s in &update.starved_states {
            log.note(WarningKind::StarvedTransitionRow, Some(&names[*s]), iteration, 1);
        }
        let initial = update_initial(&posteriors);
        let mut change = max_abs_diff(update.matrix.as_slice(), params.transition.as_slice())
            .max(max_abs_diff(initial.probs(), params.initial.probs()));
        params.transition = update.matrix;
        params.initial = initial;

        let emissions_frozen = config.freeze_emissions_after.is_some_and(|n| iteration > n);
        if !emissions_frozen {
            let bandwidth_frozen = config.freeze_bandwidth_after.is_some_and(|n| iteration > n);
            for m in 0..k {
                let old = &params.emissions[m];
                let gamma = posteriors.gamma_column(m);
                let Some(e) = m_step_member(
                    &residuals,
                    m,
                    gamma,
                    old.bandwidth(),
                    bandwidth_frozen,
                    q,
                    config,
                    &names[m],
                    iteration,
                    &mut log,
                )?
                else {
                    continue;
                };
                change = change.max((e.bandwidth() - old.bandwidth()).abs());
                params.emissions[m] = e;
            }
        }

        posteriors = expectation(&residuals, &params, names, iteration, &trace, &mut log)?;
        let ll = posteriors.log_likelihood();
        let delta = (ll - *trace.last().expect("trace seeded")).abs();
        trace.push(ll);
        if delta < lit(config.loglik_tol) && change < lit(config.param_tol) {
            converged = true;
            break;
        }
    }
    if !converged {
        log.note(WarningKind::NoConvergence, None, iterations, 1);
    }

    let stationary = stationary_distribution_with(
        &params.transition,
        &params.initial,
        lit(config.pi_star_tol),
        hmm::STATIONARY_MAX_ITERS,
    )?;
    Ok(FitOutcome {
        model: EnsembleModel {
            transition: params.transition,
            initial: params.initial,
            stationary,
            emissions: params.emissions,
            q,
            member_names: names.to_vec(),
            fit_trace: trace,
        },
        converged,
        iterations,
        warnings: log.entries,
    })
}

#[allow(clippy::too_many_arguments)]
fn m_step_member<T: Real>(
    residuals: &ResidualMatrix<T>,
    member: usize,
    gamma: Vec<T>,
    previous_bandwidth: T,
    bandwidth_frozen: bool,
    q: T,
    config: &FitConfig,
    name: &str,
    iteration: usize,
    log: &mut WarningLog,
) -> Result<Option<MqeEmission<T>>, FitError> {
    let column = residuals.column(member);
    let (values, weights): (Vec<T>, Vec<T>) = column
        .iter()
        .zip(&gamma)
        .filter(|(_, g)| **g > T::zero())
        .map(|(r, g)| (*r, *g))
        .unzip();
    let total: T = weights.iter().copied().sum();
    if values.len() < 2 || !(total > lit(1e-300)) {
        log.note(WarningKind::StarvedMember, Some(name), iteration, 1);
        return Ok(None);
    }

    let bandwidth = if bandwidth_frozen {
        previous_bandwidth
    } else {
        let sample = WeightedSample::new(values, weights)?;
        match sample.silverman_bandwidth() {
            None => {
                log.note(WarningKind::DegenerateResiduals, Some(name), iteration, 1);
                previous_bandwidth
            }
            Some(pilot) => {
                let candidates = config.candidates.resolve(pilot);
                let mut rng = member_rng(config.seed, name);
                select_bandwidth_with_rng(&sample, &candidates, config.bootstrap_resamples, &mut rng)?
                    .bandwidth
            }
        }
    };

    let e = MqeEmission::fit(column, gamma, bandwidth, q)?;
    if let Some(reason) = e.fallback() {
        log.note(WarningKind::ConstraintDropped(reason), Some(name), iteration, 1);
    }
    Ok(Some(e))
}

fn expectation<T: Real>(
    residuals: &ResidualMatrix<T>,
    params: &Params<T>,
    names: &[String],
    iteration: usize,
    trace: &[T],
    log: &mut WarningLog,
) -> Result<Posteriors<T>, FitError> {
    let (table, floored) = likelihood_table(residuals, &params.emissions).map_err(|(row, m)| {
        FitError::NonFiniteLikelihood {
            iteration,
            member: names[m].clone(),
            row,
            trace: trace.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        }
    })?;
    log.note(WarningKind::FlooredLikelihoods, None, iteration, floored);
    Ok(forward_backward(&table, &params.transition, &params.initial)?)
}

/// Emission densities at every residual, floored at the type's likelihood
/// floor. Returns the table and how many entries were floored, or the
/// `(row, member)` of the first non-finite density.
fn likelihood_table<T: Real>(
    residuals: &ResidualMatrix<T>,
    emissions: &[MqeEmission<T>],
) -> Result<(LikelihoodTable<T>, usize), (usize, usize)> {
    let steps = residuals.steps();
    let k = residuals.members();
    let floor = T::likelihood_floor();
    let mut floored = 0;
    let columns: Vec<Vec<T>> = emissions
        .iter()
        .enumerate()
        .map(|(m, e)| e.pdf_many(&residuals.column(m)))
        .collect();
    let mut values = Vec::with_capacity(steps * k);
    for t in 0..steps {
        for (m, column) in columns.iter().enumerate() {
            let v = column[t];
            if !v.is_finite() {
                return Err((t, m));
            }
            if v < floor {
                floored += 1;
                values.push(floor);
            } else {
                values.push(v);
            }
        }
    }
    let table = LikelihoodTable::new(steps, k, values).expect("entries checked finite and positive");
    Ok((table, floored))
}

/// Log-likelihood of `series` under a fitted model.
pub fn loglik<T: Real>(series: &TimeSeriesFrame<T>, model: &EnsembleModel<T>) -> Result<T, FitError> {
    if series.member_names() != model.member_names.as_slice() {
        return Err(FitError::ShapeMismatch {
            what: "member labels",
            model: format!("{:?}", model.member_names),
            series: format!("{:?}", series.member_names()),
        });
    }
    if series.q() != model.q {
        return Err(FitError::ShapeMismatch {
            what: "quantile level",
            model: model.q.to_string(),
            series: series.q().to_string(),
        });
    }
    let residuals = build_residuals(series)?;
    let (table, _) = likelihood_table(&residuals, &model.emissions).map_err(|(row, m)| {
        FitError::NonFiniteLikelihood {
            iteration: 0,
            member: model.member_names[m].clone(),
            row,
            trace: Vec::new(),
        }
    })?;
    Ok(hmm::log_likelihood(&table, &model.transition, &model.initial)?)
}

fn fallback_bandwidth<T: Real>(values: &[T]) -> T {
    let scale = values.iter().fold(T::one(), |acc, v| acc.max(v.abs()));
    scale * lit(1e-6)
}

fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x - *y).abs())
        .fold(T::zero(), T::max)
}

/// Per-member bootstrap generator. Every iteration replays the same stream,
/// so resamples move only as the weights move and the bandwidth can settle.
fn member_rng(seed: u64, member: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(member));
    rng
}

// FNV-1a; stable across builds, unlike the std hasher.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
