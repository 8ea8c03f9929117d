//! Minimal reverse-mode differentiation over dense `f64` tensors.

pub mod checkpoint;
mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod tensor;
pub mod trace;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{sgd_step, ParamStore, Sgd};
pub use tensor::Tensor;
pub use trace::{smooth_l1, softmax_row, Trace, Var};

#[cfg(test)]
mod tests;
