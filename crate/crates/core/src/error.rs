use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GradError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("sampling failed at step {step}: {msg}")]
    Sampling { step: usize, msg: String },

    #[error("{0}")]
    Size(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<GradError>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classes used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl GradError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GradError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        GradError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            GradError::Config(_) | GradError::Argument(_) => ErrorClass::Config,
            GradError::Parse { .. }
            | GradError::Data(_)
            | GradError::Io { .. }
            | GradError::Checkpoint(_)
            | GradError::UndefinedRatio(_)
            | GradError::Metric(_)
            | GradError::Size(_)
            | GradError::Contract(_) => ErrorClass::Data,
            GradError::Shape(_)
            | GradError::Numeric(_)
            | GradError::Training { .. }
            | GradError::Sampling { .. } => ErrorClass::Numeric,
            GradError::Stage { source, .. } => source.class(),
        }
    }
}
