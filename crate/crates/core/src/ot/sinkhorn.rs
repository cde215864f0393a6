use serde::{Deserialize, Serialize};

use super::{check_problem, OtError, TransportPlan};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the largest marginal deviation falls to this level.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornSolution {
    /// `<C, pi_eps>`, without the entropy term.
    pub value: f64,
    pub plan: TransportPlan,
    pub iterations: usize,
    /// Largest marginal deviation of the returned plan.
    pub residual: f64,
    pub converged: bool,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic OT by alternating dual updates in the log domain.
///
/// The plan is `pi_ij = exp((f_i + g_j - C_ij) / eps)`. Zero-weight support
/// points get zero rows/columns. Running out of iterations is not an error;
/// the solution carries `converged = false` and the residual.
pub fn sinkhorn(
    alpha: &[f64],
    beta: &[f64],
    cost: &[f64],
    config: &SinkhornConfig,
) -> Result<SinkhornSolution, OtError> {
    check_problem(alpha, beta, cost)?;
    if !(config.epsilon > 0.0) {
        return Err(OtError::BadEpsilon(config.epsilon));
    }
    let eps = config.epsilon;
    let (k, l) = (alpha.len(), beta.len());
    let rows: Vec<usize> = (0..k).filter(|&i| alpha[i] > 0.0).collect();
    let cols: Vec<usize> = (0..l).filter(|&j| beta[j] > 0.0).collect();
    let log_a: Vec<f64> = alpha.iter().map(|a| a.ln()).collect();
    let log_b: Vec<f64> = beta.iter().map(|b| b.ln()).collect();
    let mut f = vec![0.0; k];
    let mut g = vec![0.0; l];

    let plan_of = |f: &[f64], g: &[f64]| {
        let mut p = vec![0.0; k * l];
        for &i in &rows {
            for &j in &cols {
                p[i * l + j] = ((f[i] + g[j] - cost[i * l + j]) / eps).exp();
            }
        }
        TransportPlan::new(k, l, p)
    };

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < config.max_iters {
        iterations += 1;
        for &i in &rows {
            let lse = log_sum_exp(cols.iter().map(|&j| (g[j] - cost[i * l + j]) / eps));
            f[i] = eps * (log_a[i] - lse);
        }
        for &j in &cols {
            let lse = log_sum_exp(rows.iter().map(|&i| (f[i] - cost[i * l + j]) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        // columns are exact after the g-update; rows carry the residual
        let mut worst: f64 = 0.0;
        for &i in &rows {
            let lse = log_sum_exp(cols.iter().map(|&j| (f[i] + g[j] - cost[i * l + j]) / eps));
            worst = worst.max((lse.exp() - alpha[i]).abs());
        }
        residual = worst;
        if residual <= config.tol {
            break;
        }
    }
    let plan = plan_of(&f, &g);
    let residual = plan.marginal_violation(alpha, beta).max(residual.min(f64::MAX));
    let value = plan.cost(cost);
    Ok(SinkhornSolution {
        value,
        plan,
        iterations,
        converged: residual <= config.tol,
        residual,
    })
}
