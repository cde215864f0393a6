mod common;

use gfn_pathreg::env::{Environment, Hypergrid};
use gfn_pathreg::evaluator::exact_terminal_distribution;
use gfn_pathreg::tb::{sample_batch, sample_trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn first_action_frequencies_follow_the_mixture() {
    let env = Hypergrid::new(2, 8, 1e-3).unwrap();
    let model = common::random_model(&env, 5, 1.0);
    let logp = model.forward_policy(&env, &env.initial_state()).unwrap();
    let alpha = 0.3;
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = vec![0usize; env.num_actions()];
    // short trajectories would be cheaper, but the first action is all we need
    for s in sample_batch(&model, &env, alpha, n, &mut rng).unwrap() {
        counts[s.actions[0]] += 1;
    }
    let k = logp.len() as f64;
    for (a, &c) in counts.iter().enumerate() {
        let p = (1.0 - alpha) * logp[a].exp() + alpha / k;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = c as f64 / n as f64;
        assert!((freq - p).abs() <= 3.0 * se, "action {a}: {freq} vs {p} (se {se})");
    }
}

#[test]
fn uniform_exploration_ignores_the_model() {
    let env = Hypergrid::new(2, 8, 1e-3).unwrap();
    let model = common::random_model(&env, 6, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40_000;
    let mut stops = 0;
    for _ in 0..n {
        let s = sample_trajectory(&model, &env, 1.0, &mut rng).unwrap();
        if s.actions[0] == env.stop_action() {
            stops += 1;
        }
    }
    let p = 1.0 / 3.0;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((stops as f64 / n as f64 - p).abs() <= 3.0 * se);
}

#[test]
fn dp_matches_monte_carlo() {
    let env = Hypergrid::new(2, 8, 1e-3).unwrap();
    let model = common::random_model(&env, 8, 0.7);
    let exact = exact_terminal_distribution(&model, &env).unwrap();
    assert!((exact.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let n = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut counts = std::collections::HashMap::new();
    let mut left = n;
    while left > 0 {
        let b = left.min(50_000);
        for s in sample_batch(&model, &env, 0.0, b, &mut rng).unwrap() {
            *counts.entry(s.terminal().clone()).or_insert(0usize) += 1;
        }
        left -= b;
    }
    // 3 standard errors per state is a 0.27% false-alarm rate that compounds
    // over 64 states, and the normal approximation fails for states expected
    // fewer than ~20 times. Populated states get a 4-SE bound plus a joint
    // chi-square bound; rare ones a Poisson-scale bound on the raw count.
    let mut chi2 = 0.0;
    let mut df = 0usize;
    for (x, &p) in exact.states().iter().zip(exact.probs()) {
        let c = counts.get(x).copied().unwrap_or(0) as f64;
        let expected = p * n as f64;
        if expected >= 20.0 {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let z = (c / n as f64 - p) / se;
            assert!(z.abs() <= 4.0, "{x}: z = {z}");
            chi2 += (c - expected).powi(2) / expected;
            df += 1;
        } else {
            assert!(c <= expected + 4.0 * expected.sqrt() + 2.0, "{x}: {c} hits, {expected} expected");
        }
    }
    let df = df as f64;
    assert!(chi2 <= df + 5.0 * (2.0 * df).sqrt(), "chi2 {chi2} on {df} cells");
}
