//! Physics-informed generative models for short temperature time series.
//!
//! Four variational autoencoders share one toolbox: a plain VAE, a VAE with a
//! Gaussian-process prior over latent paths (GPVAE), a VAE whose decoder is
//! Newton's law of heating/cooling (PIVAE), and the combination in which a
//! GP-prior discrepancy branch corrects the physical decoder (PIGPVAE).
//!
//! - [`data`]: CSV loading, surrogate curves, normalization, splits.
//! - [`gp`]: kernel matrices, exact GP posterior, `log Z`, sampling.
//! - [`nets`]: the differentiation tape, MLPs, encoder and decoder heads.
//! - [`physics`]: Newton decoder, rate positivity map, Gaussian KL.
//! - [`models`]: objectives, generation and reconstruction.
//! - [`training`]: the full-batch Adam loop and gradient checking.
//! - [`metrics`]: MMD, correlation difference, marginal distribution
//!   difference, PCA and density exports.

// `!(x > 0.0)` is the NaN-rejecting form used throughout validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gp;
pub mod metrics;
pub mod models;
pub mod nets;
pub mod physics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/physics.md")]
    mod physics {}
    #[doc = include_str!("../../../book/src/gp.md")]
    mod gp {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
