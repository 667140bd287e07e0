//! Desk-scale latent diffusion testbed.
//!
//! A fully self-contained miniature latent diffusion model over a synthetic
//! shapes world, with subject-feature conditioning, grounding-token layout
//! conditioning, and training-free box-constrained cross-attention guidance.
//! Everything runs on CPU in 64-bit floats so gradients and losses can be
//! verified against independent oracles.
//!
//! The numeric core (`tensor`, `autodiff`, `attention`, `fourier`) is generic
//! over the scalar type; the concrete f64 aliases below are what the model
//! stack and the CLI use.

pub mod adapter;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fourier;
pub mod gradcheck;
pub mod imageio;
pub mod layout;
pub mod model;
pub mod rng;
pub mod sample;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fourier::FourierSpec;
pub use scalar::Scalar;

/// Working tensor type of the shipped pipeline (64-bit).
pub type Tensor = tensor::Tensor<f64>;
/// Single-precision tensor alias for callers that want it.
pub type Tensor32 = tensor::Tensor<f32>;
/// Working tape type of the shipped pipeline.
pub type Tape = autodiff::Tape<f64>;
/// Working node handle of the shipped pipeline.
pub type Var<'t> = autodiff::Var<'t, f64>;
