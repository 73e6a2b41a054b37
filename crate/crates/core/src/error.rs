use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum LsdError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// An exact oracle refused to enumerate because the path count is above its guard.
    #[error("capacity exceeded: {count} decompositions, limit {limit}")]
    Capacity { count: String, limit: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite {what} on example {example}")]
    NonFinite { what: &'static str, example: usize },

    /// Beam search ran out of steps before any hypothesis emitted end-of-sequence.
    #[error("no hypothesis finished within {max_steps} steps (best partial log-prob {best_partial:.6})")]
    EmptyResult {
        max_steps: usize,
        best_partial: f64,
        partials: Vec<Vec<usize>>,
    },

    /// A failure inside one stage of an experiment.
    #[error("{stage}: {source}")]
    Stage { stage: String, source: Box<LsdError> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LsdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LsdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the experiment stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        LsdError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        LsdError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LsdError::Config(msg.into())
    }

    /// Short category name, used by the CLI for exit codes and diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            LsdError::InvalidInput(_) => "input",
            LsdError::Config(_) => "config",
            LsdError::Capacity { .. } => "capacity",
            LsdError::CorruptCheckpoint(_) | LsdError::ShapeMismatch { .. } => "checkpoint",
            LsdError::State(_) => "state",
            LsdError::NonFinite { .. } => "numeric",
            LsdError::EmptyResult { .. } => "decode",
            LsdError::Io { .. } => "io",
            LsdError::Stage { source, .. } => source.category(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LsdError>;
