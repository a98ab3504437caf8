//! Dense-tensor reverse-mode differentiation with the operator set the
//! keypoint model needs, including double backpropagation through the
//! critic's point-wise operators.

pub mod checkpoint;
mod conv;
mod gemm;
mod params;
mod tape;
mod tensor;

pub use params::{Adam, AdamConfig, BoundParams, ParamStore};
pub use tape::{Gradients, Tape, Var, L2_EPS};
pub use tensor::Tensor;
