//! Dense tensors, a reverse-mode tape, parameter storage and a
//! finite-difference gradient checker.

mod gradcheck;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, FiniteDiffReport, DEFAULT_SAMPLES};
pub use ops::{matmul, mean_over_rows, sigmoid, softmax_rows, softplus};
pub use params::{Param, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
