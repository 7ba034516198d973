use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input text is empty after whitespace normalization")]
    EmptyInput,
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {row} sums to {sum}, not 1")]
    RowNotStochastic { row: usize, sum: f64 },
    #[error("entry ({row}, {col}) = {value} lies outside [0, 1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("trace has no decoding steps")]
    EmptyTrace,
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("embedding file has dimension {found}, requested {expected} (line {line})")]
    DimensionMismatch { expected: usize, found: usize, line: usize },
    #[error("document has {len} tokens, more than the maximum {max}")]
    InputTooLong { len: usize, max: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("value for {0:?} is out of range")]
    OutOfRange(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("duplicate configuration key {0:?}")]
    DuplicateKey(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("path for {field:?} does not exist: {path}")]
    MissingPath { field: String, path: PathBuf },
    #[error("missing artifact {0:?}; run the {} stage first", producer(.0))]
    MissingArtifact(String),
    #[error("dataset error at line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn producer(artifact: &str) -> &'static str {
    match artifact {
        "traces" => "extract",
        "checkpoint" => "distill",
        "importance" => "infer",
        _ => "upstream",
    }
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::OutOfRange(_)
            | Error::UnknownKey(_)
            | Error::DuplicateKey(_)
            | Error::Config(_)
            | Error::MissingPath { .. }
            | Error::InvalidArgument(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::NonFinite(_) | Error::Diverged { .. } => 4,
            _ => 1,
        }
    }
}
