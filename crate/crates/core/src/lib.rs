//! Steered mixture-of-experts (SMoE) image regression.
//!
//! A grayscale image is modelled as a continuous function: softmax gates built from steered
//! Gaussian kernels blend constant experts (or, in RBF mode, the kernels are summed directly).
//! Models are fitted by gradient descent on an L1-regularized MSE. Initialization can come from
//! a regular grid, block K-Means, random placement inside segments, or the adaptive pipeline:
//! segment the image, fit a small model per segment on a normalized block with adaptive kernel
//! doubling, then export and merge the local kernels into one global model.

pub mod baseline;
pub mod error;
pub mod export;
pub mod image;
pub mod local;
pub mod metrics;
pub mod model;
pub mod modelfile;
pub mod optimizer;
pub mod pipeline;
pub mod segment;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use model::{kernel_response, Domain, GateVector, Kernel, MixtureModel, Mode};
