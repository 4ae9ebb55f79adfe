//! Crate-wide error types.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Structural(String),

    #[error("point behind camera (depth {depth:.3e} m)")]
    BehindCamera { depth: f64 },

    #[error("triangulation underdetermined: {usable} usable observations, need at least 2")]
    Underdetermined { usable: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("{path}:{line}: {kind}")]
    Schema {
        path: String,
        line: usize,
        kind: SchemaErrorKind,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {term} at frame {frame}")]
    NonFinite { term: String, frame: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Individual schema violations detected while parsing interchange files.
///
/// Each documented constraint gets its own variant so callers can match on
/// the failure class, and every [`Error::Schema`] carries the file path and
/// one-based line number where the violation occurred.
#[derive(Debug, Error)]
pub enum SchemaErrorKind {
    #[error("malformed JSON: {0}")]
    MalformedLine(String),

    #[error("expected {expected} points, got {got}")]
    WrongPointCount { expected: usize, got: usize },

    #[error("expected {expected} scores, got {got}")]
    WrongScoreCount { expected: usize, got: usize },

    #[error("score {value} outside [0, 1]")]
    ScoreOutOfRange { value: f64 },

    #[error("non-finite coordinate")]
    NonFiniteCoordinate,

    #[error("unknown field `{0}` (strict mode)")]
    UnknownField(String),

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("duplicate frame {0}")]
    DuplicateFrame(usize),

    #[error("missing frame {0} (frames must be contiguous from 0)")]
    MissingFrame(usize),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 input schema, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Schema { .. } | Error::Json { .. } => 3,
            _ => 1,
        }
    }
}
