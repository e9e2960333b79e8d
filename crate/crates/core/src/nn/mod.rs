//! Dense tensors, reverse-mode differentiation and optimizers.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::{ParameterSet, Tensor};
