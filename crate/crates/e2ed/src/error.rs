use thiserror::Error;

/// Errors surfaced by tensor math, model assembly, the synthetic world,
/// and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree for the named operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (token id, row, parameter name) is out of its valid range.
    #[error("index error: {0}")]
    Index(String),

    /// A sequence or text segment exceeds its pinned maximum length.
    #[error("length error: {0}")]
    Length(String),

    /// An operation was called in a state that does not permit it.
    #[error("state error: {0}")]
    State(String),

    /// A dataset line failed validation; carries the 1-based line number.
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    /// A checkpoint file is malformed (magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint does not match the parameter set implied by its config.
    #[error("compatibility error: {0}")]
    Incompatible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
