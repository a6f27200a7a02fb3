//! Dense tensors with a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamIndex};
pub use tape::{huber, log_sum_exp, sigmoid, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::dot;
