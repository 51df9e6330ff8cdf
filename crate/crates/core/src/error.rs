use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid quantizer: {0}")]
    Quant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mode {0} needs a chip instance")]
    MissingChip(&'static str),

    #[error("non-recoverable chip: {0}")]
    NonRecoverable(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("dataset format: {0}")]
    Format(String),

    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("missing input file {}", .0.display())]
    MissingFile(std::path::PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
