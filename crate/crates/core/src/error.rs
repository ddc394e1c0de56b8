use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} is entirely masked")]
    DegenerateRow { row: usize },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("sequence of {len} tokens exceeds context of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("method mismatch: expected {expected}, found {found}")]
    MethodMismatch { expected: String, found: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at step {step} ({method}): {detail}")]
    Diverged {
        step: usize,
        method: String,
        detail: String,
    },

    #[error("equal-input violation for question {question}: condition inputs differ")]
    EqualInput { question: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Whether the error stems from bad input or configuration, as opposed to
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Validation(_)
                | Error::MethodMismatch { .. }
                | Error::Format(_)
                | Error::Json(_)
        )
    }
}
