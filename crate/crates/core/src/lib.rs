//! Diffusion-guided spectral + SAR fusion classifier.
//!
//! The pipeline has two phases. A denoising diffusion model is pre-trained on
//! paired spectral and SAR patches with progressive masking of the spectral
//! stack; its decoder activations then guide a three-branch classifier
//! (convolutional, attention, state-space) trained with a mutual-learning
//! objective.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod cnn;
pub mod config;
pub mod data_io;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod mutual;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod ssm;
pub mod synthetic;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
