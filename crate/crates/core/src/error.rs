use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FsdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FsdError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate features: centered self-HSIC {value:e} is below {floor:e}")]
    DegenerateFeatures { value: f64, floor: f64 },

    #[error("every sample in the batch has degenerate token features")]
    DegenerateBatch,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,

    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FsdError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        FsdError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        FsdError::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than usage or missing files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FsdError::NonFinite { .. }
                | FsdError::DegenerateFeatures { .. }
                | FsdError::DegenerateBatch
                | FsdError::Divergence { .. }
                | FsdError::Domain { .. }
        )
    }

    /// Process exit status: 2 numerical, 3 missing dependency, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            FsdError::MissingDependency(_) => 3,
            e if e.is_numerical() => 2,
            _ => 1,
        }
    }
}
