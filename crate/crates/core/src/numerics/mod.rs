//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_difference_check, relative_error, GradCheckConfig, GradCheckReport, ParamReport,
};
pub use tape::{cosine_similarity, Tape, Var};
pub use tensor::{log_softmax_slice, log_sum_exp, sigmoid, Precision, Tensor};
pub(crate) use tensor::log_add;
