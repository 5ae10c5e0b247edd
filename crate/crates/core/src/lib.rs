//! Window-scale-decay multiple instance learning on whole-slide embedding
//! bags: bag I/O, cluster-based sampling, the model, training and
//! evaluation, and a synthetic bag generator.

pub mod bag;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod seeds;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
