use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{0}")]
    InvalidArg(String),
    #[error("syntax error at offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("elaboration error: {0}")]
    Elaborate(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    FileFormat { path: String, msg: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
