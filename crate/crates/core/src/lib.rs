//! Hybrid sequence model mixing sliding-window attention with a fast-weight
//! memory that is trained at test time, plus streaming decode, synthetic
//! long-stream tasks and a small training and benchmarking harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`).

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod fast_weights;
pub mod flops;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod spatial;
pub mod streaming;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Params32 = model::ModelParams<Tensor32>;
pub type Params64 = model::ModelParams<Tensor64>;
pub type FastWeights32 = fast_weights::FastWeights<f32>;
pub type FastWeights64 = fast_weights::FastWeights<f64>;
