use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer received operands with incompatible shapes.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An operation was called outside its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    /// A CTC label cannot be aligned within the available time steps.
    #[error(
        "label of length {label_len} with {repeats} adjacent repeats needs at least \
         {} time steps, but the matrix has {t_steps}",
        label_len + repeats
    )]
    InfeasibleLabel {
        label_len: usize,
        repeats: usize,
        t_steps: usize,
    },

    /// Text contains a symbol outside the charset.
    #[error("character {ch:?} at position {pos} is not in the charset")]
    UnknownSymbol { ch: char, pos: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not match its expected format.
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownSymbol { .. } | Error::Parse { .. }
        )
    }
}
