//! Separable causal diffusion for autoregressive video: a causal encoder that
//! runs once per frame and a frame-wise diffusion decoder that runs once per
//! denoising step, plus an entangled causal diffusion transformer baseline.

// Range checks are written as `!(x >= lo)` so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod baseline;
pub mod config;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod family;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod probe;
pub mod rollout;
pub mod scd;
pub mod tensor;
pub mod train;

pub use autograd::Var;
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
