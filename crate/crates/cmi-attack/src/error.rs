//! Error taxonomy shared across the library.
//!
//! Variants are grouped by how the CLI maps them to exit codes: config
//! errors exit 2, data errors exit 3, backend capability errors exit 4,
//! everything else is an internal failure.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CmiError>;

#[derive(Debug, Error)]
pub enum CmiError {
    /// Tensor or embedding dimensions do not match what the callee declared.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// Input violates a precondition (non-finite values, empty set, bad range).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A vector that must be normalized has zero norm.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    /// Strict pairing was requested for lists of mismatched lengths.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// The backend does not support the requested operation.
    #[error("backend capability: {0}")]
    Capability(String),

    /// Configuration failed to parse or violates an invariant.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset, embedding table, or artifact content failed to load.
    #[error("data error: {0}")]
    Data(String),

    /// A metric has an empty denominator for the given records.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// An artifact was refused before persistence (e.g. non-finite metric).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CmiError {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CmiError::Config(_) => 2,
            CmiError::Data(_) | CmiError::Io { .. } | CmiError::Validation(_) => 3,
            CmiError::Capability(_) => 4,
            _ => 1,
        }
    }

    /// Convenience for attaching a path to an io failure.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CmiError::Io { path: path.as_ref().display().to_string(), source }
    }
}
