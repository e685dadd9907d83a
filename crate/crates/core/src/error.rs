//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any operation in this crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("layer {layer}: dimension mismatch, expected {expected}, got {got}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("checkpoint format version {found} unsupported (current {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("eigensolver did not converge, off-diagonal residual {residual:.3e}")]
    EigenNonConvergence { residual: f64 },

    #[error(
        "layer {layer} has {params} parameters, above the dense Hessian cap {cap}; \
         use trace estimation instead"
    )]
    CapacityExceeded {
        layer: usize,
        params: usize,
        cap: usize,
    },

    #[error("{context}: matrix is singular or ill-conditioned (condition estimate {cond:.3e})")]
    SingularMatrix { context: String, cond: f64 },

    #[error("class {class} missing from the clean labels")]
    MissingClass { class: usize },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("{what} is empty")]
    EmptyInput { what: String },

    #[error("csv error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Csv { line: Option<usize>, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad configuration or inputs.
    Config,
    /// Numeric failure (divergence, non-convergence, singularity).
    Numeric,
    /// Problem size exceeds a configured capacity.
    Capacity,
    /// Filesystem / serialization trouble.
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            DimensionMismatch { .. }
            | LabelOutOfRange { .. }
            | InvalidParameter { .. }
            | EmptyInput { .. }
            | MissingClass { .. }
            | VersionMismatch { .. } => ErrorCategory::Config,
            NonFinite { .. }
            | Divergence { .. }
            | EigenNonConvergence { .. }
            | SingularMatrix { .. } => ErrorCategory::Numeric,
            CapacityExceeded { .. } => ErrorCategory::Capacity,
            CorruptCheckpoint(_) | Csv { .. } | Io(_) | Json(_) => ErrorCategory::Io,
        }
    }

    pub fn invalid_parameter(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
