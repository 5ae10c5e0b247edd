//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Computations are recorded on a [`Graph`] as they run; [`Graph::backward`]
//! then sweeps the tape once in reverse. Every value is `f64`, which keeps
//! central finite-difference checks meaningful down to ~1e-8.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod linalg;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use linalg::{pinv_newton_schulz, DEFAULT_PINV_ITERS};
pub use tensor::Tensor;
