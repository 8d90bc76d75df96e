use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no ground plane: {0}")]
    NoGroundPlane(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("parameter file {path}: architecture fingerprint mismatch (expected {expected}, found {found})")]
    Fingerprint {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("average precision undefined: no positive ground-truth pixels")]
    UndefinedAp,

    #[error("train/test seed overlap: {0:?}")]
    SeedOverlap(Vec<u64>),

    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short machine-parsable category, used as the prefix of CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::NoGroundPlane(_) => "no-ground-plane",
            Error::DegenerateGeometry(_) => "degenerate-geometry",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Fingerprint { .. } => "fingerprint",
            Error::UndefinedAp => "undefined-ap",
            Error::SeedOverlap(_) => "seed-overlap",
            Error::CheckFailed(_) => "check-failed",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
