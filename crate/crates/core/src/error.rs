use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("row magnitude {row} is not positive")]
    NonPositiveMagnitude { row: usize },

    #[error("cannot orthogonalize an all-zero matrix")]
    ZeroMatrix,

    #[error("loss was not recorded on this tape")]
    LossNotOnTape,

    #[error("loss must be a scalar, got {len} elements")]
    NonScalarLoss { len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid spatial grid: {0}")]
    Grid(String),

    #[error("infeasible task configuration: {0}")]
    Task(String),

    #[error("streaming: {0}")]
    Stream(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True when the failure is a NaN/Inf or divergence condition.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::ZeroNormRow { .. } | Error::ZeroMatrix
        )
    }
}
