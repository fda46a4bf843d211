//! PP-LiteSeg real-time semantic segmentation on a small reverse-mode
//! autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for models, `f64` for
//! gradient checking). The aliases at the crate root fix the element type to
//! `f32` for ordinary use.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image_io;
pub mod kernels;
pub mod labels;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use blocks::{AttentionKind, Fusion};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_INDEX};
pub use model::{EncoderSpec, ModelConfig};
pub use nn::Mode;
pub use parallel::THREADS_ENV;
pub use scalar::{DType, Scalar};

pub type Tensor = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph = autograd::Graph<f32>;
pub type Var = autograd::Var<f32>;
pub type Model = model::Model<f32>;
pub type Model64 = model::Model<f64>;
