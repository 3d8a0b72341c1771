use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("layout error: expected {expected}, got {got}")]
    Layout { expected: String, got: String },

    #[error("parameter error: {0}")]
    Param(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("numeric error at index {index}: {msg}")]
    Numeric { index: usize, msg: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("sampling diverged at timestep {t}")]
    Sampling { t: usize },

    #[error("non-finite loss at step {step}; batch dumped to {}", dump.display())]
    Divergence { step: u64, dump: PathBuf },

    #[error("size error: {0}")]
    Size(String),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("archive format error: {0}")]
    Format(String),

    #[error("checkpoint load error at {path}: {msg}")]
    Load { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
