use std::path::PathBuf;

/// Errors produced by the translation engine.
///
/// The CLI maps these onto exit codes: configuration and flag problems are
/// usage errors, malformed or inconsistent input files are data errors,
/// everything else is a runtime failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {context} (expected {expected}, got {got})")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("index {index} out of range for {context} of size {size}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        size: usize,
    },

    #[error("model dimension {dim} not divisible by {heads} heads")]
    HeadsIndivisible { dim: usize, heads: usize },

    #[error("fully masked attention row {row}")]
    FullyMaskedRow { row: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("search space too large: {candidates} candidates exceed limit {limit}")]
    SearchSpaceTooLarge { candidates: u64, limit: u64 },

    #[error("line count mismatch: {left_name} has {left} lines, {right_name} has {right}")]
    LineCountMismatch {
        left_name: String,
        left: usize,
        right_name: String,
        right: usize,
    },

    #[error("parse error in {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Parse {
            what,
            detail: detail.into(),
        }
    }

    /// True for errors caused by malformed or inconsistent input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. } | Error::LineCountMismatch { .. } | Error::Io { .. }
        )
    }

    /// True for errors caused by invalid configuration or flags.
    pub fn is_usage_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
