use thiserror::Error;

use crate::model::StepDiagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate batch: statistics need at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("non-finite feature in {context}")]
    NonFinite { context: String },

    #[error("zero-norm embedding in {context}")]
    ZeroNorm { context: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("loss node is not scalar: shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("computation graph is not acyclic: node {node} references {parent}")]
    Cycle { node: usize, parent: usize },

    #[error("multiplicity unsatisfiable: {0}")]
    MultiplicityUnsatisfiable(String),

    #[error("labeled target {id} not present in ranking")]
    MissingTarget { id: usize },

    #[error("numeric failure at epoch {}, step {}: {}", .0.epoch, .0.step, .0.offending)]
    NumericFailure(Box<StepDiagnostic>),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(
        context: impl Into<String>,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
