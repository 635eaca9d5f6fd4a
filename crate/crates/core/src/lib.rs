//! Dilated neighborhood attention transformer for image deblurring, on a
//! small CPU tensor library with tape-based reverse-mode differentiation.
//!
//! Feature maps are NHWC. Everything numeric is generic over [`Scalar`]
//! (`f32` for training and inference, `f64` for gradient checking).

pub mod attention;
pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
