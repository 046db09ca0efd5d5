//! Minimal dense-tensor math for the CLSP networks: a dynamic reverse-mode
//! tape, AdamW with decoupled weight decay, and a finite-difference gradient
//! checker. Training runs in `f32`; every op is generic so the same network
//! code can run in `f64` for gradient checks.

pub mod error;
pub mod float;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use float::{DType, Float};
pub use gradcheck::{
    analytic_gradients, compare_with_finite_differences, gradient_check, Differentiable,
    GradCheckOptions, GradCheckReport, Precision,
};
pub use optim::{adamw_step, AdamW, AdamWConfig, OptimizerState};
pub use params::{Bound, ParamStore};
pub use tape::{gelu_scalar, softmax_cross_entropy, Gradients, Tape, Var};
pub use tensor::Tensor;
