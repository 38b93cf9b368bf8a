//! Forward and backward implementations for every primitive the network needs.

pub mod activation;
pub mod batchnorm;
pub mod combine;
pub mod conv;
pub mod resample;

pub use activation::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
pub use batchnorm::{batchnorm_backward, batchnorm_infer, batchnorm_train, BnStats};
pub use combine::{add, concat_backward, concat_channels};
pub use conv::{conv2d_backward, conv2d_forward, conv_out_dim};
pub use resample::{upsample2x_backward, upsample2x_forward};
