//! Pansharpening toolkit core.
//!
//! Fuses a low-resolution multispectral (MS) cube with a high-resolution
//! panchromatic (PAN) image in two stages:
//!
//! 1. [`fusion`] — bicubic upsampling of the MS cube, 1×1 channel adjustment
//!    of the MS+PAN concatenation, and a residual 3D convolutional predictor
//!    over the band-as-depth volume.
//! 2. [`texture`] — per-band texture transfer with PAN as the reference:
//!    a learnable texture extractor, patch relevance by normalized inner
//!    product, hard-attention feature transfer and a soft-attention gate.
//!
//! Supporting machinery: a minimal reverse-mode autodiff engine over exactly
//! the operation set the two networks need ([`tensor`], [`autodiff`],
//! [`optim`], [`gradcheck`]), bicubic resampling and reduced-resolution
//! degradation for building training pairs ([`resample`]), binary raster and
//! weight formats plus patch/split handling ([`raster`], [`io`], [`patches`]),
//! and the evaluation metric suite ([`metrics`]).
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f32` for training and inference, `f64` as the shadow mode for gradient
//! checking); concrete aliases live at the crate root.

pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod patches;
pub mod raster;
pub mod resample;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod texture;
pub mod training;

pub use error::CoreError;
pub use raster::RasterVolume;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor, the training/inference carrier.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, the gradient-checking shadow carrier.
pub type Tensor64 = Tensor<f64>;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
