use proptest::prelude::*;
use ptse_core::hmm::{stationary_distribution, StateDistribution, TransitionMatrix};
use ptse_core::model::EnsembleModel;
use ptse_core::predictor::{ensemble_cdf, ensemble_pdf, ensemble_quantile, quantile_bracket, q_risk, ForecastInput};
use ptse_core::scalar::norm_cdf;
use ptse_core::simulator::{
    random_transition_matrix, run_convergence_experiment, sample_hmm, GaussianEmission, ScaleReading, SimConfig,
};
use ptse_testkit as kit;
use rand::Rng;

fn random_model(seed: u64, q: f64) -> (EnsembleModel<f64>, ForecastInput<f64>) {
    let mut rng = kit::rng(seed);
    let k = 3;
    let emissions = (0..k).map(|_| kit::random_feasible_emission(q, &mut rng)).collect();
    let stationary = kit::random_distribution(k, &mut rng);
    let model = EnsembleModel {
        transition: TransitionMatrix::uniform(k),
        initial: StateDistribution::uniform(k),
        stationary,
        emissions,
        q,
        member_names: (0..k).map(kit::member_label).collect(),
        fit_trace: vec![],
    };
    let preds = (0..k).map(|_| 20.0 * rng.random::<f64>() - 10.0).collect();
    (model, ForecastInput::new("h1", preds))
}

fn quadrature_cdf(model: &EnsembleModel<f64>, input: &ForecastInput<f64>, upto: f64) -> f64 {
    let (lo, _) = quantile_bracket(model, input);
    let h = model.bandwidths().into_iter().fold(f64::INFINITY, f64::min);
    let panels = ((upto - lo) / h).ceil().max(1.0) as usize;
    kit::integrate(|y| ensemble_pdf(model, input, y).unwrap(), lo, upto, panels, 1e-12)
}

#[test]
fn mixture_matches_direct_sum_and_quadrature() {
    for seed in 0..30 {
        let q = [0.1, 0.5, 0.9][seed as usize % 3];
        let (model, input) = random_model(seed, q);
        for y in [-7.0, 0.0, 3.3, 12.0] {
            let direct: f64 = (0..3)
                .map(|k| {
                    model.stationary.probs()[k]
                        * kit::emission_pdf_by_sum(&model.emissions[k], y - input.member_predictions[k])
                })
                .sum();
            assert!((ensemble_pdf(&model, &input, y).unwrap() - direct).abs() < 1e-12);
        }
        let forecast = ensemble_quantile(&model, &input).unwrap();
        assert!(forecast.cdf_residual <= 1e-9);
        let by_quadrature = quadrature_cdf(&model, &input, forecast.quantile_value);
        assert!((by_quadrature - q).abs() <= 1e-8, "seed {seed}: {by_quadrature} vs {q}");
        let (lo, hi) = quantile_bracket(&model, &input);
        let h = model.bandwidths().into_iter().fold(f64::INFINITY, f64::min);
        let total = kit::integrate(
            |y| ensemble_pdf(&model, &input, y).unwrap(),
            lo,
            hi,
            ((hi - lo) / h).ceil() as usize,
            1e-12,
        );
        assert!((total - 1.0).abs() < 1e-6);
    }
}

#[test]
fn q_risk_matches_hand_computation() {
    let y: [f64; 5] = [3.2, -1.5, 7.75, 0.4, 2.0];
    let p = [2.9, -0.5, 8.0, 0.4, 3.5];
    // losses at q = 0.7: 0.21, 0.3, 0.075, 0, 0.45; |y| sum = 14.85
    let expected: f64 = 2.0 * (0.7 * 0.3 + 0.3 * 1.0 + 0.3 * 0.25 + 0.0 + 0.3 * 1.5) / 14.85;
    assert!((q_risk(&y, &p, 0.7).unwrap() - expected).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantile_is_shift_equivariant(seed in any::<u64>(), q in 0.05f64..0.95, c in -50.0f64..50.0) {
        let (model, input) = random_model(seed, q);
        let base = ensemble_quantile(&model, &input).unwrap();
        prop_assert!(base.cdf_residual <= 1e-9);
        let shifted = ForecastInput::new("h1", input.member_predictions.iter().map(|m| m + c).collect());
        let moved = ensemble_quantile(&model, &shifted).unwrap();
        prop_assert!((moved.quantile_value - base.quantile_value - c).abs() <= 1e-9);
    }

    #[test]
    fn mixture_cdf_is_monotone(seed in any::<u64>(), y in -30.0f64..30.0, gap in 0.0f64..10.0) {
        let (model, input) = random_model(seed, 0.5);
        prop_assert!(ensemble_cdf(&model, &input, y).unwrap() <= ensemble_cdf(&model, &input, y + gap).unwrap() + 1e-15);
    }

    #[test]
    fn q_risk_is_nonnegative(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..30), q in 0.01f64..0.99) {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(y.iter().any(|v| *v != 0.0));
        prop_assert!(q_risk(&y, &p, q).unwrap() >= 0.0);
        prop_assert_eq!(q_risk(&y, &y, q).unwrap(), 0.0);
    }
}

fn two_state(steps: usize) -> SimConfig {
    SimConfig {
        transition: TransitionMatrix::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap(),
        emissions: vec![
            GaussianEmission { mean: 0.0, std_dev: 1.0 },
            GaussianEmission { mean: 3.0, std_dev: 2.0 },
        ],
        steps,
        replications: 1,
        tau: 0.5,
        seed: 0,
    }
}

#[test]
fn occupancy_converges_to_stationary() {
    let config = two_state(100_000);
    let pi = stationary_distribution(&config.transition, &StateDistribution::uniform(2)).unwrap();
    let path = sample_hmm(&config, &StateDistribution::new(vec![1.0, 0.0]).unwrap(), 21).unwrap();
    let ones = path.states.iter().filter(|s| **s == 1).count() as f64 / 1e5;
    assert!((ones - pi.probs()[1]).abs() < 0.01);
}

#[test]
fn single_state_cdf_reaches_gaussian_value() {
    let config = SimConfig::gaussian_ladder(1, 100_000, 3, 0.5, 4, ScaleReading::StdDev).unwrap();
    let report = run_convergence_experiment(&config).unwrap();
    let target = norm_cdf((0.5 - 0.2) / 2.0);
    assert!((report.limit - target).abs() < 1e-15);
    for traj in &report.trajectories {
        assert!((traj.last().unwrap() - target).abs() < 0.01);
    }
}

#[test]
fn experiment_is_reproducible_and_bounded() {
    let config = SimConfig::gaussian_ladder(3, 300, 20, 0.5, 9, ScaleReading::StdDev).unwrap();
    let a = run_convergence_experiment(&config).unwrap();
    assert_eq!(a, run_convergence_experiment(&config).unwrap());
    assert!(a.trajectories.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    let far = SimConfig { tau: 0.6 + 20.0 * (3f64.sqrt() + 1.0), ..config.clone() };
    let b = run_convergence_experiment(&far).unwrap();
    assert!(b.mean.iter().all(|m| *m == 1.0));
    // the limit depends only on the chain, not on the per-replication starts
    assert_eq!(a.limit, config.limit_cdf(&a.stationary, 0.5));
}

#[test]
fn noiseless_emissions_reproduce_means() {
    let config = SimConfig {
        emissions: vec![
            GaussianEmission { mean: -1.0, std_dev: 1e-12 },
            GaussianEmission { mean: 4.0, std_dev: 1e-12 },
        ],
        ..two_state(500)
    };
    let path = sample_hmm(&config, &StateDistribution::uniform(2), 3).unwrap();
    for (s, o) in path.states.iter().zip(&path.observations) {
        assert!((o - config.emissions[*s].mean).abs() < 1e-9);
    }
}

#[test]
fn random_matrices_decay_geometrically() {
    for seed in 0..20 {
        let a = random_transition_matrix(2 + seed as usize % 5, seed);
        let decay = ptse_core::hmm::frobenius_decay(&a, 30);
        let lambda = kit::eigen_moduli(&a)[1];
        // bound with a generous constant while the distance is above rounding
        for (t, d) in decay.iter().filter(|(_, d)| *d > 1e-11) {
            assert!(*d <= 10.0 * (a.states() as f64) * lambda.powi(*t as i32) + 1e-12, "seed {seed} t {t}");
        }
    }
}
