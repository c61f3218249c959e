use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid particle {index}: {reason}")]
    InvalidParticle { index: usize, reason: String },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("multigrid did not converge in {cycles} cycles (relative residual {last:.3e}, history {history:?})")]
    NoConvergence {
        cycles: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::Image { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::InvalidParticle { .. }
            | Error::InvalidCamera(_)
            | Error::InvalidScene(_)
            | Error::ShapeMismatch { .. }
            | Error::Contract(_) => "invalid-input",
            Error::Degenerate(_) | Error::NoConvergence { .. } | Error::NonFinite(_) => "numeric",
        }
    }
}
