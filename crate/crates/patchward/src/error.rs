use thiserror::Error;

/// Crate-wide error type. Each variant maps to a stable machine-readable
/// category so the CLI can translate failures into exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("incompatible version: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("training failed at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("pipeline failure: {0}")]
    Pipeline(String),

    #[error("missing prerequisite: {0}")]
    Dependency(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable category label for machine-readable error reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Input(_) => "input",
            Error::Training { .. } => "training",
            Error::Calibration(_) => "calibration",
            Error::Pipeline(_) => "pipeline",
            Error::Dependency(_) => "dependency",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
