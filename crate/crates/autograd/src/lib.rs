//! A compact reverse-mode automatic differentiation engine over dense `f64`
//! tensors.
//!
//! Tensors are immutable, reference counted nodes. Every operation on a
//! tensor that requires gradients records the operation and its inputs, so
//! calling [`Tensor::backward`] on a scalar walks the recorded graph in
//! reverse topological order. Operations on tensors that do not require
//! gradients record nothing, which makes inference passes cheap.
//!
//! The [`nn`] module layers a named parameter store, a few standard layers and
//! the AdamW optimizer on top of the engine.

mod backward;
mod error;
pub mod fd;
mod gemm;
pub mod nn;
mod ops;
mod shape;
mod tensor;

pub use backward::Gradients;
pub use error::{Result, TensorError};
pub use shape::{broadcast_shapes, numel};
pub use tensor::Tensor;
