//! Blind face restoration lab, CPU only and fully self-contained.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]) on top of which the restoration network is assembled:
//! style-modulated transformer generator blocks ([`blocks`], [`model`]),
//! a Haar-wavelet global discriminator plus facial-component critics
//! ([`wavelet`], [`model`]), the full loss stack ([`losses`]), paired-data
//! synthesis and differentiable augmentation ([`pipeline`]), and the
//! training loop / checkpointing / CLI ([`train`], [`config`], [`cli`]).
//!
//! Everything runs in `f32` at training time; every differentiable op also
//! instantiates at `f64` so gradients can be verified against central
//! finite differences (see [`tensor::gradcheck`]).

pub mod blocks;
pub mod cli;
pub mod config;
pub mod error;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
