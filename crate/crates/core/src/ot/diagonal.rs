use super::{check_measure, OtError, TransportPlan};

fn check(alpha: &[f64], beta: &[f64], diag: &[f64]) -> Result<(), OtError> {
    check_measure(alpha)?;
    check_measure(beta)?;
    if alpha.len() != beta.len() || diag.len() != alpha.len() {
        return Err(OtError::SupportMismatch(alpha.len(), beta.len().max(diag.len())));
    }
    if let Some((index, &value)) = diag.iter().enumerate().find(|(_, &c)| !(c <= 0.0)) {
        return Err(OtError::PositiveDiagonal { index, value });
    }
    Ok(())
}

/// OT value for a square cost that is `diag` on the diagonal and zero
/// elsewhere, with `diag <= 0`: `sum_i min(alpha_i, beta_i) * diag_i`.
pub fn diagonal_ot(alpha: &[f64], beta: &[f64], diag: &[f64]) -> Result<f64, OtError> {
    check(alpha, beta, diag)?;
    Ok(alpha
        .iter()
        .zip(beta)
        .zip(diag)
        .map(|((a, b), c)| a.min(*b) * c)
        .sum())
}

/// An optimal coupling for [`diagonal_ot`]: the shared mass `min(alpha_i,
/// beta_i)` stays on the diagonal and the leftovers are spread as a product.
pub fn diagonal_plan(alpha: &[f64], beta: &[f64]) -> Result<TransportPlan, OtError> {
    check(alpha, beta, &vec![0.0; alpha.len()])?;
    let n = alpha.len();
    let shared: Vec<f64> = alpha.iter().zip(beta).map(|(a, b)| a.min(*b)).collect();
    let rest = 1.0 - shared.iter().sum::<f64>();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        p[i * n + i] = shared[i];
        if rest > 0.0 {
            for j in 0..n {
                if i != j {
                    p[i * n + j] = (alpha[i] - shared[i]) * (beta[j] - shared[j]) / rest;
                }
            }
        }
    }
    Ok(TransportPlan::new(n, n, p))
}
