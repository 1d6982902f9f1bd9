//! Multi-modal 3D segmentation at desk scale.
//!
//! The crate is self-contained: a reverse-mode autodiff engine over dense
//! f64 tensors ([`tensor`]), a synthetic phantom generator ([`datagen`]),
//! the fusion/gating modules and backbone ([`fusion`], [`backbone`]), the
//! training objectives ([`losses`]), a variational Bayesian output layer
//! ([`bayes`]), evaluation metrics ([`metrics`]), the experiment harness
//! ([`harness`]) and bit-exact on-disk formats ([`io`], [`config`]).

pub mod backbone;
pub mod bayes;
pub mod config;
pub mod datagen;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
