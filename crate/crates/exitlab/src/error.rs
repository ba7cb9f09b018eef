//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

/// Everything that can go wrong across data generation, training, and
/// evaluation. Variants carry enough context to diagnose the failure from the
/// message alone.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received operands with incompatible dimensions.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A required input file or checkpoint does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// An output path already exists and `--force` was not given.
    #[error("refusing to overwrite existing output {0} (pass --force to replace it)")]
    WouldOverwrite(String),

    /// Training produced a non-finite value.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// A binary artifact failed to parse.
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    /// An on-policy batch was produced by an older parameter version.
    #[error("stale transition batch: collected at parameter version {batch}, store is at {store}")]
    StaleBatch { batch: u64, store: u64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    /// Invariant violation that indicates a bug rather than bad input.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 for bad configuration, 3 for missing
    /// inputs, 4 for numerical divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Divergence(_) => 4,
            _ => 1,
        }
    }
}

/// Shorthand for building a [`Error::Shape`] from formatted operand shapes.
pub fn shape_error(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::Shape {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}
