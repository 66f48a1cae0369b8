//! Distribution ensemble for probabilistic forecasts.
//!
//! Member forecasters supply `q`-quantile predictions; the ensemble treats
//! "which member is currently right" as the hidden state of an HMM, fits the
//! chain and per-member residual densities by Baum-Welch, and forecasts the
//! `q`-quantile of the stationary mixture.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the double-precision instantiations used by the CLI.

pub mod estimator;
pub mod frame;
pub mod hmm;
pub mod model;
pub mod mqe;
pub mod predictor;
pub mod scalar;
pub mod simulator;
pub mod wkde;

pub use estimator::{fit, loglik, CandidateGrid, FitConfig, FitError, FitOutcome, FitWarning, WarningKind};
pub use frame::{FrameError, TimeSeriesFrame};
pub use hmm::{
    forward_backward, frobenius_decay, stationary_distribution, update_initial, update_transition,
    HmmError, LikelihoodTable, Posteriors, StateDistribution, TransitionMatrix,
};
pub use model::{from_document, to_document, EnsembleModel, ModelError};
pub use mqe::{build_residuals, solve_side_constants, ConstraintFallback, MqeEmission, MqeError};
pub use predictor::{
    ensemble_cdf, ensemble_pdf, ensemble_quantile, q_risk, EnsembleForecast, ForecastInput, PredictError,
};
pub use scalar::Real;
pub use simulator::{
    constant_member_frame, random_transition_matrix, run_convergence_experiment, sample_hmm, ConvergenceReport,
    GaussianEmission, ScaleReading, SimConfig, SimError,
};
pub use wkde::{select_bandwidth, BandwidthSelection, KdeError, KdeModel, WeightedSample};

pub type Transition = TransitionMatrix<f64>;
pub type Distribution = StateDistribution<f64>;
pub type Frame = TimeSeriesFrame<f64>;
pub type Emission = MqeEmission<f64>;
pub type Model = EnsembleModel<f64>;
pub type Forecast = EnsembleForecast<f64>;

pub type TransitionF32 = TransitionMatrix<f32>;
pub type FrameF32 = TimeSeriesFrame<f32>;
pub type ModelF32 = EnsembleModel<f32>;
