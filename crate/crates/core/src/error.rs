use thiserror::Error;

/// Errors raised by the numerical kernels and the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// Input contains NaN/Inf or violates a precondition on values.
    #[error("invalid input: {0}")]
    Input(String),

    /// Invalid configuration value; the string carries the field path.
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Instance exceeds what a deliberately small-scale routine supports.
    #[error("instance too large: {0}")]
    Size(String),

    /// A scalar function evaluated to NaN/Inf.
    #[error("non-finite evaluation: {0}")]
    Evaluation(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents.
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
