//! Dense `f64` tensors and reverse-mode automatic differentiation.

pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
