//! Kolmogorov-Arnold networks built from fast element-wise basis functions
//! (ReLU, sin, cos, arctan) whose per-function outputs are merged by
//! element-wise sum or product, alongside MLP and spline/RBF KAN baselines.

pub mod autograd;
pub mod basis;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod tensor;
pub mod training;

pub use autograd::{Activation, Tape, Var};
pub use basis::{BasisKind, Elementwise, GridBasis, RbfSpec, SplineSpec};
pub use error::{Error, Result};
pub use tensor::Tensor;
