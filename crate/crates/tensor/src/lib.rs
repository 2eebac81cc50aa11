//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Values are `f64` throughout. Computations are recorded on a [`Tape`] and
//! differentiated with [`Tape::backward`]; parameters live outside the tape
//! as plain [`Tensor`]s and are updated with [`Adam`].

mod adam;
mod error;
mod linalg;
mod mask;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::TensorError;
pub use mask::AttentionMask;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    tape::sigmoid(x)
}
