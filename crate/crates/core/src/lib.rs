//! Cascaded Atrous Group Attention (CAGA).
//!
//! A small, dependency-light deep-learning stack built around the CAGA
//! block: dilated-convolution self-attention per head (cascaded across
//! dilation rates), cascaded across heads, wrapped by a depthwise-separable
//! input projection and batch normalization. Around it sit a reverse-mode
//! autodiff tape, a desk-scale classifier, the training and cross-validation
//! protocol, Grad-CAM, and parameter/MAC accounting.

pub mod caga;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interpret;
mod kernels;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod profile;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod tnsr;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
