//! Dense tensors, reverse-mode autodiff, gradient checking and optimization.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use ops::concat;
pub use optim::AdamW;
pub use params::{Ctx, Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
