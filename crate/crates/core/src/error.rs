//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulator operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not chain.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Temperature must be strictly positive.
    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),

    /// A latent vector had numerically zero norm and cannot be normalized.
    #[error("degenerate embedding: latent norm {norm:.3e} below 1e-12")]
    DegenerateEmbedding { norm: f64 },

    /// Class id not present in the text bank.
    #[error("unknown class id {0}")]
    UnknownClass(usize),

    /// Configuration rejected before any work started.
    #[error("config error: {0}")]
    Config(String),

    /// A partition scheme produced an empty shard even after retries.
    #[error("partition rejected: client {client} shard empty after {retries} retries")]
    EmptyShard { client: usize, retries: usize },

    /// A client aborted its local update; the round cannot complete.
    #[error("client {client} failed: {source}")]
    ClientFailure {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    /// Malformed serialized payload.
    #[error("wire format error: {0}")]
    Wire(String),

    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(
        context: &'static str,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// True for errors caused by invalid user input (config/validation),
    /// as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidTemperature(_)
                | Error::ShapeMismatch { .. }
                | Error::UnknownClass(_)
        )
    }
}
