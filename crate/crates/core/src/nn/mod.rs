//! Exact-gradient engine for the block-structured model family.

mod loss;
mod model;
mod optim;
mod tensor;
pub mod train;

pub use loss::{
    backward, log_softmax, loss_value, loss_value_with_teachers, softmax, teacher_log_probs,
    Gradient, HeadSet, LossSpec, PrototypeLoss, Targets,
};
pub use model::{
    parameter_count, BlockKind, BlockNetModel, BlockNetSpec, ForwardOutput, Linear, ModelShape,
};
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use tensor::Tensor;
