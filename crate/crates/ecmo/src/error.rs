//! Crate-wide error type. Each variant maps to one machine-parsable
//! category slug used by the CLI (`error[<category>]: message`).

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or parameter shapes do not fit the operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation that needs at least one element got none.
    #[error("empty sequence: {0}")]
    EmptySequence(String),

    /// A token id or row index fell outside its table.
    #[error("index out of range: {0}")]
    Index(String),

    /// A caller broke an operation's stated precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Parallel token sequences differ in length.
    #[error("alignment mismatch: {0}")]
    Alignment(String),

    /// A file's bytes do not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint and configuration disagree.
    #[error("incompatible configuration: {0}")]
    Compatibility(String),

    /// A candidate list violates the evaluation protocol.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Bad command line.
    #[error("{0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::EmptySequence(_) => "empty-sequence",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Alignment(_) => "alignment",
            Error::Format(_) => "format",
            Error::Compatibility(_) => "compatibility",
            Error::Protocol(_) => "protocol",
            Error::Usage(_) => "usage",
            Error::Io(_) => "io",
        }
    }
}
