//! A small reverse-mode automatic differentiation library over dense `f64` tensors.
//!
//! Values are row-major [`Tensor`]s. Differentiable computation goes through
//! [`Var`], which records each op and its backward rule as it is evaluated.
//! Calling [`Var::backward`] on a scalar output fills in gradients of every leaf.
//!
//! ```
//! use refcod_tensor::{Tensor, Var};
//!
//! let w = Var::leaf(Tensor::from_vec(&[2], vec![0.5, -1.0]));
//! let x = Var::constant(Tensor::from_vec(&[2], vec![3.0, 4.0]));
//! let loss = (&w * &x).sum().square();
//! loss.backward();
//! assert_eq!(w.grad().unwrap().data(), &[-15.0, -20.0]);
//! ```
//!
//! Everything runs single-threaded with a fixed reduction order, so repeated
//! runs are bit-identical on the same machine.

mod error;
mod graph;
mod tensor;

pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;

pub use error::TensorError;
pub use graph::Var;
pub use tensor::{broadcast_shape, Tensor};
