//! Quantization-aware training and integer inference for stable residual
//! networks.
//!
//! The crate has three layers:
//!
//! * numeric foundations — [`tensor`], the raw kernels in [`ops`], and the
//!   reverse-mode tape in [`autograd`];
//! * model building blocks — fake quantization with learnable clip scales
//!   ([`quant`]), residual/smoothing blocks ([`layers`]), and graph
//!   convolution variants ([`graph`]);
//! * tooling — the stability laboratory ([`stability`]), the training loop
//!   ([`train`]), synthetic datasets ([`data`]), checkpoint/container I/O
//!   ([`checkpoint`]), integer-only inference ([`intinfer`]), and experiment
//!   configuration ([`config`]).
//!
//! All numerics are generic over [`scalar::Scalar`] (`f32` or `f64`);
//! verification and integer export are `f64`.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod intinfer;
pub mod layers;
pub mod ops;
pub mod quant;
pub mod scalar;
pub mod stability;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision tensor, the default for training and verification.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor for the compact storage mode.
pub type Tensor32 = tensor::Tensor<f32>;
