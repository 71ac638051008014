//! Dense tensors, reverse-mode gradients and the transformer sublayers built on them.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use graph::{Graph, Targets, Var};
pub use params::{Grads, Param, ParamStore};
pub use tensor::{Real, Tensor};
