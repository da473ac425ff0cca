//! Dense reverse-mode differentiation, finite-difference checking and Adam.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, InputReport};
pub use tape::{sigmoid, softplus, CustomOp, Gradients, Tape, Var};
pub(crate) use tape::bilinear_tap;
pub use tensor::{pairwise_sum, tree_sum, Shape, Tensor};
