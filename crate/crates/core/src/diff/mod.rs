//! Reverse-mode differentiation over dense `f64` arrays.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod nn;
mod ops;
pub mod optim;

pub use graph::{BackwardFn, DiffTensor, Gradients, Graph, ParamId, ParamStore, Var};
pub use nn::{Activation, Conv3d, Init, Mlp};
pub use ops::{sigmoid_f, softplus_f};
pub use optim::{Optimizer, OptimizerConfig};
