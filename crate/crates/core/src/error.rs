use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{op}: shape mismatch {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("non-deterministic loss: re-evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("no artifacts found in {}", .0.display())]
    NoArtifacts(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidArgument(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LabError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable error kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Shape { .. } => "shape",
            LabError::NonFinite { .. } => "non_finite",
            LabError::InvalidArgument(_) => "invalid_argument",
            LabError::ConfigMismatch(_) => "config_mismatch",
            LabError::NonDeterministic { .. } => "non_deterministic",
            LabError::Format(_) => "format",
            LabError::Config { .. } => "config",
            LabError::MissingArtifact(_) => "missing_artifact",
            LabError::NoArtifacts(_) => "no_artifacts",
            LabError::Io { .. } => "io",
        }
    }
}
