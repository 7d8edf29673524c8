use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite state after layer {layer}")]
    NonFiniteState { layer: usize },

    #[error("non-finite gradient for particle {particle}")]
    NonFiniteGradient { particle: usize },

    #[error("non-finite parameter update at step {step}")]
    NonFiniteUpdate { step: u64 },

    #[error("batch is empty")]
    EmptyBatch,

    #[error("trajectory has {found} layers but the ensemble implies {expected}")]
    TrajectoryMismatch { expected: usize, found: usize },

    #[error("ensembles must have equal particle counts and dimensions ({left} vs {right})")]
    UnequalEnsembles { left: String, right: String },

    #[error("invalid configuration `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("{op} requires a smooth activation, got {activation}")]
    NonSmoothActivation {
        op: &'static str,
        activation: &'static str,
    },

    #[error("loss is {loss:e}: already at global minimum")]
    AlreadyAtGlobalMinimum { loss: f64 },

    #[error("block output is identically zero; homogeneity degree is undefined")]
    DegenerateHomogeneity,

    #[error("sample {index} violates data bounds: {reason}")]
    DataOutOfBounds { index: usize, reason: String },

    #[error("{path}: line {line}: {reason}")]
    Csv {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(
        op: &'static str,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }

    /// True for failures caused by floating point blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteState { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteUpdate { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
