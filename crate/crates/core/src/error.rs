use thiserror::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced to callers.
///
/// Programmer errors (indexing, impossible states) panic instead; anything
/// that depends on data, configuration, or the filesystem comes back as one
/// of these so the CLI can map it to a distinct exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// A θ or x slice had the wrong length for the object consuming it.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Bad configuration value (out of range, unknown name, inconsistent).
    #[error("invalid config: {0}")]
    Config(String),

    /// A sampler could not produce the requested draws.
    #[error("sampling failed: {0}")]
    Sampler(String),

    /// Training aborted (non-finite loss or gradients).
    #[error("training failed: {0}")]
    Training(String),

    /// A reference-posterior chain failed its convergence check.
    #[error("mcmc did not converge: {0}")]
    Mcmc(String),

    /// Artifact (de)serialization problems: bad magic, version, or layout.
    #[error("artifact format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            got,
        }
    }

    /// Prefix sampler and training failures with the round they happened in;
    /// other variants pass through untouched.
    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            Error::Sampler(m) => Error::Sampler(format!("round {round}: {m}")),
            Error::Training(m) => Error::Training(format!("round {round}: {m}")),
            other => other,
        }
    }
}
