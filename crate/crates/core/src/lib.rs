//! Uncertainty-regularized contrastive training for composed image retrieval,
//! on a toy model and synthetic data.

pub mod error;
pub mod eval;
pub mod grad;
pub mod model;
pub mod numeric;
pub mod synthdata;
pub mod uncertainty;

pub use error::{Error, Result};
