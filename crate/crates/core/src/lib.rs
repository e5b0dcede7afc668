//! Task-specified knowledge distillation for small convolutional networks.
//!
//! A teacher CNN is trained on the full ten-class dataset `D`. Its
//! temperature-softened outputs on a task subset `D(θ)` (the samples of
//! classes `0..m`) become soft targets for a narrower student, trained with
//!
//! ```text
//! L_KD(θ) = 1/N Σ [ (1−λ)·H(Y(θ), P_S(θ)) + λ·H(P_T^τ(θ), P_S^τ(θ)) ]
//! ```
//!
//! Sweeping the student width (compression rate) against the task size `m`
//! maps how much of the network is redundant for simpler tasks.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the CLI, file formats and reference
//! experiments use.
//!
//! Module map:
//!
//! * [`tensor`]: dense tensors and kernels (matmul, conv, pooling, ReLU)
//! * [`nn`]: architectures, forward/backward, model files
//! * [`loss`]: temperature softmax, cross entropy, distillation losses
//! * [`data`]: MNIST / CIFAR-10 loaders, transfer sets, batching
//! * [`train`]: SGD with momentum and masked task evaluation
//! * [`compress`]: student architectures and complexity estimates
//! * [`distill`]: soft-target capture, cache files, the full pipeline
//! * [`harness`]: the (rate × subset size) grid, CSV output, threshold analysis

pub mod compress;
pub mod data;
pub mod distill;
pub mod harness;
mod error;
mod io_util;
pub mod loss;
pub mod nn;
mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model64 = nn::Model<f64>;
pub type Model32 = nn::Model<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
