//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Each forward pass builds a [`Tape`] of nodes; [`Tape::backward`] walks the
//! tape in reverse and returns gradients for every registered parameter.
//! Tensors share storage via `Arc`, so cloning values into backward closures
//! is cheap. The engine is deliberately single-threaded per tape; batch
//! parallelism is achieved by giving each sample its own tape.

mod ops;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use ops::*;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
