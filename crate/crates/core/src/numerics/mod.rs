//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major tensors, a tape that records
//! each operation a forward pass applies, and hand-derived backward rules for
//! exactly the operations the model needs.  There is no broadcasting beyond
//! adding a bias row; shape mismatches are hard errors.
//!
//! Determinism is a design requirement, not an accident: every reduction
//! (matmul inner products, softmax sums, gradient accumulation) runs in a
//! fixed order, and the `parallel` kernels split work so each output element
//! is still reduced in that same order.  Results are bit-identical across
//! thread counts.
//!
//! Elements are `f64` by default; `f32` is selectable per run through the
//! [`Scalar`] parameter.  Gradient checking always runs in `f64`.

mod gradcheck;
pub mod kernels;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, CoordinateCheck, GradCheckOptions, GradCheckReport};
pub use params::{GradBuffer, ParamId, Parameters};
pub use scalar::{cast, Dtype, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
