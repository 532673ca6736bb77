//! ResLink: a residual convolutional classifier with area-attention gating,
//! written from scratch with hand-derived backward passes.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: NHWC tensors plus convolution, pooling, padding and matmul kernels.
//! - [`layers`]: batch norm, activations, dropout, global average pooling, dense.
//! - [`attention`]: the area-attention gate.
//! - [`model`]: stem, residual stages, final attention and classifier head.
//! - [`optim`]: losses, Adam and the epoch training loop.
//! - [`data`]: image loading, label encoding, oversampling, stratified splits, batching.
//! - [`metrics`]: confusion matrix and classification report.
//! - [`gradcheck`]: finite-difference verification of every backward pass.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::Mode;
pub use model::{Head, ModelConfig, ResLinkModel};

pub use tensor::{ConvSpec, DType, Element, Padding, Tensor};

/// PRNG used for initialization, dropout, shuffling and resampling.
pub type ModelRng = rand_chacha::ChaCha8Rng;
