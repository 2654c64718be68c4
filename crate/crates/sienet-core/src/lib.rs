//! Two-stage image outpainting with a boundary-sensitive filling
//! convolution, siamese adversarial training, and SSIM/PSNR evaluation.
//!
//! Everything runs on a small self-contained tensor/autodiff core
//! ([`graph::Graph`]); training is in `f32`, while the verification suites
//! instantiate the same generic code in `f64`.

pub mod adam;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod features;
pub mod filling;
pub mod generator;
pub mod graph;
pub mod imageio;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod scalar;
pub mod shape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use scalar::Scalar;
pub use shape::Shape;
pub use tensor::Tensor;
