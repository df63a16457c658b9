//! Reverse-mode automatic differentiation over dense `f64` tensors, plus Adam.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
