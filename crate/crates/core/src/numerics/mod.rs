//! Dense float64 tensors, tape-based reverse-mode autodiff, Adam, and
//! binary checkpoints.

mod adam;
pub mod checkpoint;
mod graph;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, linear_decay, Adam, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use graph::Graph;
pub use params::{truncated_normal, Binder, Gradients, Param, ParamStore};
pub use tape::{sigmoid, Activation, Tape, Var, GATHER_ZERO};
pub use tensor::Tensor;
