//! Steganographic 3D Gaussian splatting toolkit.
//!
//! The crate embeds a hidden payload (a small RGB image or a bit string) into a
//! 3D Gaussian splat scene by training a small delta generator on top of a fixed
//! base scene, so that a convolutional decoder recovers the payload from renders
//! taken at a designated checking viewpoint while all other viewpoints stay
//! visually faithful to the base scene.
//!
//! Everything numeric is generic over [`num::Scalar`] so the same kernels run in
//! f32 (training) and f64 (finite-difference gradient verification). The
//! convenience aliases below pin the concrete types used by the CLI and tests.

pub mod config;
pub mod decode;
pub mod embed;
pub mod error;
pub mod fit;
pub mod gradsuite;
pub mod image_buf;
pub mod io;
pub mod metrics;
pub mod num;
pub mod perturb;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Training-precision scalar used by the CLI and the end-to-end pipeline.
pub type Real = f32;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Scene32 = render::GaussianScene<f32>;
pub type Scene64 = render::GaussianScene<f64>;
pub type Image32 = image_buf::ImageBuf<f32>;
pub type Image64 = image_buf::ImageBuf<f64>;
