//! Disentangled sequential autoencoders with two-stage training.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays, a reverse-mode tape, Adam and the PRNG.
//! - [`distributions`]: diagonal Gaussians (sampling, log-density, KL).
//! - [`model`]: encoders, transition prior and decoders.
//! - [`objective`]: the ELBO terms and the four swap regularisers.
//! - [`training`]: the staged schedule, early stopping and checkpoints.
//! - [`synthdata`]: the toy spectrogram corpus and its file format.
//! - [`eval`]: LDA probes, Fréchet distance and pitch accuracy.
//! - [`gradcheck`]: finite-difference verification of every operation.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distributions;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use distributions::DiagGaussian;
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use tensor::{Rng, Tape, Tensor, Var};
