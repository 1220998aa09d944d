//! Error taxonomy shared across the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A dataset class does not contain enough samples to split.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A CTC target cannot be aligned to the available frames.
    /// Distinct from numeric failure so data bugs surface early.
    #[error("infeasible target: {0}")]
    InfeasibleTarget(String),

    /// A container or checkpoint file is malformed. `offset` is the byte
    /// position at which the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
