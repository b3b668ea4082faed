use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid motion spec: {0}")]
    Spec(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("cannot tokenize {ch:?} at position {position}")]
    Tokenize { ch: char, position: usize },

    #[error("malformed answer {0:?}")]
    Parse(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("dataset composition: {0}")]
    Composition(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("context overflow: length {len} exceeds {max}")]
    Length { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint config digest mismatch (checkpoint {found}, current {expected})")]
    DigestMismatch { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data/format, 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::StageOrder(_) | Error::DigestMismatch { .. } => 1,
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
