//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is a plain value. Placing it on a [`Tape`] yields a [`Var`]
//! (the tensor's node id); every op on `Var`s is recorded when any input
//! requires grad, and [`Tape::backward`] returns [`Gradients`] for every
//! grad-requiring node.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
