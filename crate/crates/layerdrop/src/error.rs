//! Error type shared by all modules.

/// Errors produced by tensor ops, model assembly, training and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on shape; both shapes are named.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An index exceeded its axis extent (e.g. token id >= vocabulary size).
    #[error("{op}: index {index} out of bounds for extent {extent}")]
    OutOfBounds {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Masked cross-entropy was asked to average over zero positions.
    #[error("no masked tokens: the loss mask selects zero positions")]
    NoMaskedTokens,

    /// NaN/Inf appeared where the contract requires finite values.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// Bad configuration file or field.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint manifest/payload problems, including config mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
