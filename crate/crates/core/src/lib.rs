//! Per-object distance estimation from monocular images.
//!
//! A convolutional context encoder produces one feature map per frame. Each
//! annotated box is pooled into a grid of tokens, encoded with self-attention,
//! and (during training) reconstructed from a masked subset. Pooled object
//! embeddings attend to each other in a global encoder before a Gaussian head
//! predicts a distance mean and variance.

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod mom;
pub mod model;
pub mod nn;
pub mod par;
pub mod roi;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
