//! Locally smoothed neural networks.
//!
//! A locally smoothed layer is a locally connected layer whose weight matrix
//! is factored as `W = U V^T`: a shared kernel `V` modulated at every
//! position by a smoother `U`, typically a 2-D Gaussian over the patch grid.
//! The crate contains a small dense-tensor engine, the smoother math with
//! hand-derived gradients, the layers needed for the MNIST-variant
//! experiments, a training loop, and the synthetic dataset generators.

pub mod codec;
pub mod data;
pub mod equiv;
pub mod error;
pub mod layers;
pub mod model;
pub mod rng;
pub mod smoother;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
