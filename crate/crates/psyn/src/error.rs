use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("infeasible alignment: {phonemes} phonemes for {frames} frames")]
    InfeasibleAlignment { phonemes: usize, frames: usize },
    #[error("training diverged at step {step}, last finite loss {last_loss}")]
    Diverged { step: usize, last_loss: f32 },
    #[error("stage ordering violated: {0}")]
    StageOrder(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code convention: 1 validation, 2 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } | Error::Numeric(_) | Error::NonDeterministic(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
