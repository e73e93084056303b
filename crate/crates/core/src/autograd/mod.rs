//! Reverse-mode differentiation over a fixed op vocabulary, plus Adam.

mod adam;
mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use adam::{optimizer_steps_taken, AdamConfig, AdamState};
pub use gradcheck::{
    grad_check, grad_check_with, relative_error, relative_error_with_floor, GradCheck, GradCheckOptions,
};
pub use graph::{tapes_allocated, Eager, Gradients, Graph, Tape, Var};
pub use ops::{batch_channel_stats, forward_op, Conv2dSpec, Op, RayLayout, RaySpan, RunningStats};
pub use params::ParamSet;
pub use tensor::Tensor;
