use thiserror::Error;

use crate::adam::AdamError;
use crate::autodiff::AutodiffError;
use crate::env::EnvError;
use crate::ot::OtError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("state {0} was not evaluated by the policy network")]
    NotEvaluated(String),
    #[error("{0} is not a child of {1}")]
    NotAChild(String, String),
    #[error("closed-form OT requested on an environment that does not satisfy its conditions")]
    ClosedFormIneligible,
    #[error("non-positive reward {0}")]
    NonPositiveReward(f64),
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: AutodiffError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
