//! Machine unlearning for fake-quantized neural networks.
//!
//! The crate bundles a small dense network core with quantization-aware
//! training, the Similar Labels + Adaptive Gradient Reweighting unlearning
//! method, the usual unlearning baselines, evaluation metrics and an
//! experiment harness.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
pub use tensor::Tensor;
