//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Values are immutable [`Tensor`]s. Differentiable computation goes through
//! a [`Tape`]: parameters enter as leaves, every op appends a node, and
//! [`Tape::backward`] returns leaf gradients. One tape belongs to one thread;
//! independent tapes may run concurrently.

mod adam;
mod error;
#[cfg(any(test, feature = "testing"))]
pub mod finite_diff;
pub mod ops;
mod store;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use ops::conv::ConvGeometry;
pub use ops::norm::{BatchNormOptions, Mode, RunningStats};
pub use ops::softmax::softmax_values;
pub use store::{Incompatibility, ParamKind, Parameter, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
