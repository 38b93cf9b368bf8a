//! From-scratch deep residual U-Net for binary road segmentation.
//!
//! Everything the network needs is implemented by hand on a small rank-4
//! tensor engine: convolution, batch normalization, activations, nearest
//! neighbor upsampling and channel concatenation, each with an explicit
//! backward pass. On top of that sit the 7-level residual U-Net itself, SGD
//! training with an MSE loss, overlap-averaged tiled inference for large
//! images, and relaxed precision/recall evaluation with break-even points.
//!
//! The engine is generic over the scalar type: `f32` is the storage and
//! product precision (checkpoints serialize 32-bit floats), while the
//! gradient-check machinery instantiates the same code at `f64`.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod tensor;
pub mod tile;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Storage-precision tensor used by training, inference and checkpoints.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor used by oracle and gradient-check paths.
pub type Tensor64 = Tensor<f64>;
/// Storage-precision parameter store.
pub type ParamStore32 = model::ParamStore<f32>;
/// Double-precision parameter store.
pub type ParamStore64 = model::ParamStore<f64>;
