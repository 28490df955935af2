//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every operation is recorded on a [`Tape`] in creation order; calling
//! [`Tensor::backward`] on a scalar walks the tape once in reverse.
//! Trainable state lives in a [`ParamStore`] and is bound onto a fresh tape
//! for each forward pass with [`Tape::param`].

mod error;
pub mod gradcheck;
mod ops;
mod params;
mod tape;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Tape, Tensor};

/// Additive mask value for excluded attention or vocabulary slots. After
/// max-shifted exponentiation it contributes exactly zero.
pub const MASKED: f64 = -1e30;
