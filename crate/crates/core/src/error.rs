//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the numerics, quantization, training and export paths.
#[derive(Debug, Error)]
pub enum L4qError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("quantization scale must be positive, got {value} (group {group})")]
    NonPositiveScale { group: usize, value: f64 },

    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),

    #[error("code {code} outside [{q_n}, {q_p}]")]
    CodeOutOfRange { code: i32, q_n: i32, q_p: i32 },

    #[error("corrupt packing: {0}")]
    CorruptPacking(String),

    #[error("backward called without a cached forward pass")]
    MissingCache,

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("step {step} out of range for a schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("cannot export `{method}` as fully quantized: mixed-precision method")]
    MixedPrecisionExport { method: String },

    #[error("cannot export `{method}`: {reason}")]
    Unexportable { method: String, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad checkpoint: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = L4qError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> L4qError {
    L4qError::ShapeMismatch {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}
