//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set covers what the policy network and the training objectives
//! need: matrix products, bias add, leaky ReLU, masked log-softmax, scalar
//! arithmetic, `min`, clamping and reductions.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::gemm;

use thiserror::Error;

/// Floor applied to every log-probability that enters a cost or a loss.
pub const LOG_PROB_FLOOR: f64 = -60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("buffer of length {len} does not fit shape {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, len: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter #{0} is not part of this graph")]
    ParamNotInGraph(usize),
    #[error("graph was already differentiated; run a new forward pass first")]
    StaleGraph,
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { node: usize, op: &'static str },
    #[error("row {row} of a masked log-softmax has no valid entry")]
    EmptyMask { row: usize },
}

/// Log-softmax of `logits` over the entries where `mask` is true.
///
/// Masked entries come back as `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, AutodiffError> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[logits.len()], logits.to_vec())?);
    let y = g.masked_log_softmax(x, mask)?;
    Ok(g.value(y).data().to_vec())
}
