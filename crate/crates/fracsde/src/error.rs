use thiserror::Error;

/// Failure modes surfaced across the crate.
///
/// `Config` covers parameter validation, `Degenerate` covers rank/eigenvalue/
/// kernel-identity failures that make a formula inapplicable, `Divergence` is a
/// blown-up trajectory, and `Bridge` is a failed terminal-coalescence
/// postcondition.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("trajectory diverged at step {step} (|state| > {bound:.1e})")]
    Divergence { step: usize, bound: f64 },

    #[error("bridge construction failed: {0}")]
    Bridge(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub fn bridge(msg: impl Into<String>) -> Self {
        Error::Bridge(msg.into())
    }

    /// Process exit code used by the command-line frontend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Degenerate(_) | Error::Bridge(_) => 3,
            Error::Divergence { .. } => 4,
        }
    }
}
