//! Reverse-mode automatic differentiation over `f64` tensors.

mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{AmsGrad, Parameter};
pub(crate) use tape::softmax_in_place;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
