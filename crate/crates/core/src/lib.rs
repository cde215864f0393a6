//! GFlowNet training with optimal-transport path regularization.

pub mod adam;
pub mod autodiff;
pub mod env;
pub mod error;
pub mod evaluator;
pub mod ot;
pub mod path_reg;
pub mod policy;
pub mod tb;
pub mod train;

pub use error::{Error, Result};
