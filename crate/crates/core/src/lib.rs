//! Few-shot semantic segmentation by mask classification.
//!
//! A query image is divided into an `S x S` grid. A mask branch predicts one
//! mask per grid cell, a category branch predicts whether each cell holds the
//! support class, and the final score map is the probability-weighted sum of
//! the cell masks. The crate ships everything needed to train and evaluate the
//! network on CPU: a reverse-mode autodiff core, episodic data sampling with a
//! synthetic shapes dataset, losses, metrics, checkpoints and a CLI.
//!
//! The numeric core is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below name the two instantiations used in practice.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod correlation;
pub mod episodes;
pub mod error;
pub mod imaging;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor used for training and inference.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor used for gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision network.
pub type Manet32 = model::Manet<f32>;
/// Double-precision network.
pub type Manet64 = model::Manet<f64>;
/// Single-precision autodiff graph.
pub type Graph32<'a> = autograd::Graph<'a, f32>;
/// Double-precision autodiff graph.
pub type Graph64<'a> = autograd::Graph<'a, f64>;
