//! Discrete optimal transport between two finite measures.
//!
//! * [`exact_ot`]: transportation simplex, exact up to floating point.
//! * [`sinkhorn`]: log-domain entropic OT.
//! * [`diagonal_ot`]: closed form for square costs that are zero off the
//!   diagonal and non-positive on it.

mod diagonal;
mod exact;
mod sinkhorn;

pub use diagonal::{diagonal_ot, diagonal_plan};
pub use exact::{exact_ot, MAX_EXACT_SUPPORT};
pub use sinkhorn::{sinkhorn, SinkhornConfig, SinkhornSolution};

use thiserror::Error;

/// Allowed deviation of a measure's total mass from 1.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("measure has negative weight {0}")]
    NegativeWeight(f64),
    #[error("measure sums to {0}, not 1")]
    Unnormalized(f64),
    #[error("measure is empty")]
    Empty,
    #[error("cost matrix has {got} entries, expected {rows}x{cols}")]
    CostShape { rows: usize, cols: usize, got: usize },
    #[error("cost matrix has a non-finite entry")]
    NonFiniteCost,
    #[error("support of size {0} exceeds the exact solver limit")]
    TooLarge(usize),
    #[error("diagonal cost entry {index} is positive ({value})")]
    PositiveDiagonal { index: usize, value: f64 },
    #[error("supports differ in size: {0} vs {1}")]
    SupportMismatch(usize, usize),
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("simplex failed to terminate after {0} pivots")]
    NoTermination(usize),
}

/// Non-negative weights summing to one, with optional support labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure<L = usize> {
    weights: Vec<f64>,
    labels: Vec<L>,
}

impl<L> DiscreteMeasure<L> {
    pub fn new(weights: Vec<f64>, labels: Vec<L>) -> Result<Self, OtError> {
        assert_eq!(weights.len(), labels.len(), "one label per weight");
        check_measure(&weights)?;
        Ok(Self { weights, labels })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> &[L] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

impl DiscreteMeasure<usize> {
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, OtError> {
        let labels = (0..weights.len()).collect();
        Self::new(weights, labels)
    }
}

/// Row-major `rows x cols` coupling.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TransportPlan {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    /// `<C, pi>`.
    pub fn cost(&self, cost: &[f64]) -> f64 {
        self.data.iter().zip(cost).map(|(p, c)| p * c).sum()
    }

    /// Largest absolute deviation of either marginal from `alpha`, `beta`.
    pub fn marginal_violation(&self, alpha: &[f64], beta: &[f64]) -> f64 {
        let r = self
            .row_sums()
            .iter()
            .zip(alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let c = self
            .col_sums()
            .iter()
            .zip(beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        r.max(c)
    }
}

pub(crate) fn check_measure(w: &[f64]) -> Result<(), OtError> {
    if w.is_empty() {
        return Err(OtError::Empty);
    }
    if let Some(&neg) = w.iter().find(|&&x| !(x >= 0.0)) {
        return Err(OtError::NegativeWeight(neg));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(OtError::Unnormalized(total));
    }
    Ok(())
}

pub(crate) fn check_problem(alpha: &[f64], beta: &[f64], cost: &[f64]) -> Result<(), OtError> {
    check_measure(alpha)?;
    check_measure(beta)?;
    if cost.len() != alpha.len() * beta.len() {
        return Err(OtError::CostShape {
            rows: alpha.len(),
            cols: beta.len(),
            got: cost.len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(OtError::NonFiniteCost);
    }
    Ok(())
}
