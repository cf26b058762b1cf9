//! Minimal f64 tensor kernel with hand-written backpropagation.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod ops;
mod tensor;

pub use adam::Adam;
pub use loss::{soft_dice_loss, DiceReduction};
pub use net::{Arch, NetConfig, Network, ParamGrads, Tape};
pub use ops::ConvParams;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("max pooling needs even spatial dims, got {0}x{1}")]
    OddSpatialDims(usize, usize),
    #[error("input {h}x{w} is not divisible by {divisor}")]
    IndivisibleDims { h: usize, w: usize, divisor: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}
