//! Compositional image retrieval: gated-residual text/image fusion with
//! mutual-information regularization, plus the synthetic benchmarks, training
//! loop and evaluation harness around it.

pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod metric;
pub mod mi;
pub mod nn;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
