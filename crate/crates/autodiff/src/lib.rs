//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Tensor`] that has at least one parent requiring
//! grad records a node on an implicit tape (a DAG of reference-counted
//! nodes). [`Tensor::backward`] walks that DAG once in reverse topological
//! order and accumulates gradients into the leaves created with
//! [`Tensor::param`]. The tape is released as it is consumed, so each
//! forward pass supports exactly one consuming backward; [`vjp`] evaluates
//! vector-Jacobian products without consuming anything.
//!
//! ```
//! use hoi_autodiff::Tensor;
//!
//! let x = Tensor::param(vec![3.0], &[1]).unwrap();
//! let y = x.mul(&x).unwrap().sum();
//! y.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![6.0]);
//! ```

mod backward;
mod broadcast;
mod error;
pub mod gradcheck;
mod ops;
mod tensor;

pub use backward::vjp;
pub use error::{Result, TensorError};
pub use ops::elementwise::{elementwise, BinaryOp};
pub use ops::nn::LAYER_NORM_EPS;
pub use tensor::{enable_grad, is_grad_enabled, no_grad, BackwardFn, Tensor};
