//! Dense tensors, reverse-mode differentiation, parameter storage and Adam.

mod adam;
pub mod checkpoint;
mod store;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamReport, AdamState};
pub use store::{Gradients, ParamStore, Role};
pub use tape::{log_sum_exp, CustomBackward, Tape, Var};
pub(crate) use tape::{sigmoid, softplus};
pub use tensor::Tensor;
