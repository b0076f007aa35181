//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by geometry, training, data, and metric operations.
#[derive(Debug, Error)]
pub enum HypoError {
    /// A vector with norm below the rejection threshold was asked to be normalized.
    /// Silent clamping would hide encoder collapse, so this is always an error.
    #[error("degenerate norm {norm:.3e} (threshold {threshold:.1e}){context}")]
    DegenerateNorm {
        norm: f64,
        threshold: f64,
        context: String,
    },

    /// Environment shift specification violates a structural requirement.
    #[error("invalid shift spec: {0}")]
    InvalidSpec(String),

    /// A data file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    /// A data file is structurally inconsistent with its manifest.
    #[error("schema error: {0}")]
    SchemaError(String),

    /// An (environment, class) cell required by an estimator has no samples.
    #[error("empty cell: environment {env}, class {class}")]
    EmptyCell { env: usize, class: usize },

    /// Sinkhorn iterations stopped before the marginal constraints were met.
    #[error("sinkhorn did not converge: marginal violation {violation:.3e} >= tol {tol:.3e} after {iters} iterations")]
    NoConvergence {
        violation: f64,
        tol: f64,
        iters: usize,
    },

    /// Lemma verifiers require every (environment, class) cell to have the
    /// same number of samples; the proofs assume uniform cell mass.
    #[error("non-uniform cells: sizes range from {min} to {max}")]
    NonUniformCells { min: usize, max: usize },

    /// Shapes or counts disagree between two structures that must match.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Configuration value outside its documented domain.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Checkpoint and dataset disagree on input dimension or class count.
    #[error("checkpoint/dataset mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HypoError {
    pub(crate) fn degenerate(norm: f64, threshold: f64) -> Self {
        HypoError::DegenerateNorm {
            norm,
            threshold,
            context: String::new(),
        }
    }

    pub(crate) fn degenerate_ctx(norm: f64, threshold: f64, context: impl Into<String>) -> Self {
        HypoError::DegenerateNorm {
            norm,
            threshold,
            context: format!(" ({})", context.into()),
        }
    }
}

pub type Result<T> = std::result::Result<T, HypoError>;
