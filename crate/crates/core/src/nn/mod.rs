//! Tensor engine and the self-attention encoder.

pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use encoder::{attention_forward, AblationRow, Encoder, EncoderConfig, PositionFlags};
pub use tape::{Tape, Var};
pub use tensor::{Gradients, ParamId, ParamStore, Real, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input contains NaN or infinite values")]
    NonFiniteInput,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,
    #[error("finite-difference step must be positive, got {0}")]
    PrecisionLoss(f64),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Position(#[from] crate::posenc::PositionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
