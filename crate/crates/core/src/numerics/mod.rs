//! Minimal dense-tensor numerics: reverse-mode autodiff on a tape, Gaussian
//! utilities, Adam, parameter stores, checkpoints and seeded RNG streams.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! finite-difference verification). No external tensor library is involved;
//! the op set is exactly what the models upstack need.

pub mod adam;
pub mod checkpoint;
pub mod gaussian;
pub mod gradcheck;
pub mod rng;
mod scalar;
mod store;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gaussian::{tanh_log_det, Gaussian, GaussianTensors, LOG_STD_MAX, LOG_STD_MIN};
pub use scalar::Scalar;
pub use store::{ParamKey, ParamStore};
pub use tape::{Gradients, Tape, Value};
pub use tensor::Tensor;

/// Errors surfaced by the numeric engine.
#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("missing gradient for parameter {name:?}")]
    MissingGradient { name: String },
    #[error("non-finite gradient for parameter {name:?}")]
    NonFiniteGradient { name: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
