use proptest::prelude::*;
use ptse_core::hmm::{
    forward_backward, frobenius_decay, stationary_distribution, stationary_residual, update_initial,
    update_transition, LikelihoodTable, StateDistribution, TransitionMatrix,
};
use ptse_core::simulator::random_transition_matrix;
use ptse_testkit as kit;
use rand::Rng;

fn random_table<R: Rng>(steps: usize, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..steps)
        .map(|_| (0..k).map(|_| 1e-3 + 2.0 * rng.random::<f64>()).collect())
        .collect()
}

fn to_table(rows: &[Vec<f64>]) -> LikelihoodTable<f64> {
    let k = rows[0].len();
    LikelihoodTable::new(rows.len(), k, rows.concat()).unwrap()
}

#[test]
fn posteriors_match_path_enumeration() {
    let mut rng = kit::rng(11);
    for _ in 0..60 {
        let k = rng.random_range(1..=3);
        let steps = rng.random_range(2..=6);
        let a = kit::random_stochastic(k, 0.0, &mut rng);
        let pi = kit::random_distribution(k, &mut rng);
        let rows = random_table(steps, k, &mut rng);
        let post = forward_backward(&to_table(&rows), &a, &pi).unwrap();
        let exact = kit::enumerate_paths(&rows, &a, &pi);
        assert!((post.log_likelihood() - exact.log_likelihood).abs() < 1e-9);
        for t in 0..steps {
            for i in 0..k {
                assert!((post.gamma(t, i) - exact.gamma[t][i]).abs() < 1e-9);
                if t + 1 < steps {
                    for j in 0..k {
                        assert!((post.xi(t, i, j) - exact.xi[t][i][j]).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

#[test]
fn m_step_matches_enumerated_counts() {
    let mut rng = kit::rng(12);
    let (k, steps) = (3, 5);
    let a = kit::random_stochastic(k, 0.1, &mut rng);
    let pi = kit::random_distribution(k, &mut rng);
    let rows = random_table(steps, k, &mut rng);
    let post = forward_backward(&to_table(&rows), &a, &pi).unwrap();
    let exact = kit::enumerate_paths(&rows, &a, &pi);
    let updated = update_transition(&post).matrix;
    for i in 0..k {
        let denom: f64 = (0..steps - 1).map(|t| exact.gamma[t][i]).sum();
        for j in 0..k {
            let num: f64 = (0..steps - 1).map(|t| exact.xi[t][i][j]).sum();
            assert!((updated.get(i, j) - num / denom).abs() < 1e-12);
        }
    }
    let initial = update_initial(&post);
    for i in 0..k {
        assert!((initial.probs()[i] - exact.gamma[0][i]).abs() < 1e-12);
    }
}

#[test]
fn stationary_matches_linear_solve() {
    let mut rng = kit::rng(13);
    for _ in 0..50 {
        let k = rng.random_range(2..=10);
        let a = kit::random_stochastic(k, 0.0, &mut rng);
        let p = stationary_distribution(&a, &StateDistribution::uniform(k)).unwrap();
        let oracle = kit::stationary_by_solve(&a);
        for (x, y) in p.probs().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
        assert!(stationary_residual(&a, p.probs()) <= 1e-12);
    }
}

/// Least-squares slope of `ln d_t` against `t` over the points above `floor`.
fn log_slope(decay: &[(usize, f64)], from: usize, to: usize, floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = decay
        .iter()
        .filter(|(t, d)| *t >= from && *t <= to && *d > floor)
        .map(|(t, d)| (*t as f64, d.ln()))
        .collect();
    if pts.len() < 5 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Some(sxy / sxx)
}

#[test]
fn decay_rate_is_second_eigenvalue_modulus() {
    // uniform random rows mix within a few steps, so the early window is the
    // only one above rounding noise
    for seed in 0..10 {
        let a = random_transition_matrix(4, seed);
        let decay = frobenius_decay(&a, 60);
        let lambda = kit::eigen_moduli(&a)[1];
        let slope = log_slope(&decay, 3, 60, 1e-10).expect("enough points above the noise floor");
        assert!(
            (slope - lambda.ln()).abs() <= 0.1 * lambda.ln().abs(),
            "seed {seed}: slope {slope}, ln lambda {}",
            lambda.ln()
        );
        assert!(decay.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12));
    }
}

fn random_gamma_case() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=4, 2usize..=40, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posteriors_are_distributions((k, steps, seed) in random_gamma_case()) {
        let mut rng = kit::rng(seed);
        let a = kit::random_stochastic(k, 0.0, &mut rng);
        let pi = kit::random_distribution(k, &mut rng);
        let rows: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..k).map(|_| (-30.0 * rng.random::<f64>()).exp()).collect())
            .collect();
        let post = forward_backward(&to_table(&rows), &a, &pi).unwrap();
        for t in 0..steps {
            let g: f64 = post.gamma_row(t).iter().sum();
            prop_assert!((g - 1.0).abs() < 1e-12);
            if t + 1 < steps {
                let mut x = 0.0;
                for i in 0..k {
                    let row: f64 = (0..k).map(|j| post.xi(t, i, j)).sum();
                    prop_assert!((row - post.gamma(t, i)).abs() < 1e-9);
                    x += row;
                }
                prop_assert!((x - 1.0).abs() < 1e-12);
            }
        }
        let updated = update_transition(&post).matrix;
        for i in 0..k {
            prop_assert!((updated.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_emission_em_never_decreases((k, steps, seed) in (2usize..=4, 20usize..=80, any::<u64>())) {
        let mut rng = kit::rng(seed);
        let rows = random_table(steps, k, &mut rng);
        let table = to_table(&rows);
        let mut a = kit::random_stochastic(k, 0.0, &mut rng);
        let mut pi = kit::random_distribution(k, &mut rng);
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..15 {
            let post = forward_backward(&table, &a, &pi).unwrap();
            prop_assert!(post.log_likelihood() >= prev - 1e-8);
            prev = post.log_likelihood();
            a = update_transition(&post).matrix;
            pi = update_initial(&post);
        }
    }
}

#[test]
fn identity_rows_keep_mass_in_place() {
    let a = TransitionMatrix::<f64>::identity(3);
    let p = StateDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
    assert_eq!(stationary_distribution(&a, &p).unwrap(), p);
}
