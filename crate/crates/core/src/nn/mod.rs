//! Dense tensors, reverse-mode autodiff, layers and the Adam optimizer.

pub mod checkpoint;
pub mod graph;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{Graph, Var};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{AdamConfig, Bindings, ParamStore};
pub use tensor::{Scalar, Tensor};
