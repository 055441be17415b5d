use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum SimmerError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("unknown token \"{0}\" (closed vocabulary)")]
    UnknownToken(String),
    #[error("sequence length {got} exceeds maximum {max}")]
    Overlength { got: usize, max: usize },
    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("recipe world error: {0}")]
    World(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimmerError>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: &[usize]) -> SimmerError {
    SimmerError::ShapeMismatch {
        op,
        expected: expected.into(),
        got: format!("{got:?}"),
    }
}
