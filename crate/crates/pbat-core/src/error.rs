use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to point at the
/// offending input (field names, line numbers, tensor names) without the
/// caller having to re-derive it.
#[derive(Debug, Error)]
pub enum PbatError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("no negative candidate exists for this sequence")]
    NoNegativeCandidate,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PbatError>;
