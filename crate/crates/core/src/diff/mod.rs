//! Reverse-mode differentiation, parameter storage and optimization.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, Objective};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use real::{Dd, Real};
pub use tensor::Tensor;
