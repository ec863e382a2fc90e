//! Low-light RAW denoising without per-camera noise calibration.
//!
//! The crate covers the whole pipeline: a physics-based noise synthesizer
//! driven by virtual cameras, a UNet built from RepNR blocks (camera-specific
//! alignment, a shared 3x3 convolution and a zero-initialized out-of-model
//! branch), two-phase few-shot fine-tuning, and exact structural
//! reparameterization into a plain UNet for deployment.
//!
//! Heavy inner loops (convolutions, batch synthesis, evaluation) run on rayon
//! when the default `parallel` feature is enabled. Work is split into chunks
//! of fixed size, so results are bit-identical for any thread count and for
//! the sequential build.

// `!(x > lo)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod camera;
pub mod error;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod optim;
pub mod ops;
pub mod par;
pub mod raw;
pub mod repnr;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{LedError, Result};
pub use tensor::{DType, Scalar, Tensor};
