//! Dense Siamese self-supervised learning on a small reverse-mode autodiff
//! engine: pixel-level and region-level similarity objectives, an unsupervised
//! segmentation extension, training loop, and Hungarian-matched evaluation.
//!
//! All numeric code is generic over [`Scalar`]; training uses `f32` and
//! gradient verification uses `f64`.

pub mod data;
pub mod dst1;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Model32 = nn::DenseSiamModel<f32>;
pub type Model64 = nn::DenseSiamModel<f64>;
pub type Trainer32 = train::Trainer<f32>;
