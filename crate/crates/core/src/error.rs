use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("degenerate normalization over {0} element(s)")]
    DegenerateNorm(usize),

    #[error("sequence of length {len} exceeds context of {context}")]
    Context { len: usize, context: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("matrix error: {0}")]
    Matrix(String),

    #[error("convergence error: {0}")]
    Convergence(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing upstream artifact {path} (run `{stage}` first)")]
    Dependency { stage: &'static str, path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::Index { .. } => "index",
            Error::NonFinite(_) => "numeric",
            Error::DegenerateNorm(_) => "degenerate-norm",
            Error::Context { .. } => "context",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Validation(_) => "validation",
            Error::Matrix(_) => "matrix",
            Error::Convergence(_) => "convergence",
            Error::Sizing(_) => "sizing",
            Error::Format(_) => "format",
            Error::Dependency { .. } => "dependency",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
