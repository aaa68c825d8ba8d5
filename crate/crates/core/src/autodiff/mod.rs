//! Minimal tensor type and reverse-mode differentiation engine with support
//! for differentiating through gradients.

pub mod kernels;
mod ops;
mod tensor;
mod trace;

pub use kernels::{ConvGeom, PoolGeom};
pub use ops::{eval_primitive, Op};
pub use tensor::Tensor;
pub use trace::{GradientMap, NodeId, Record, Trace, Var};
