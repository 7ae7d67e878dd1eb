//! The four generative models: objectives, generation, reconstruction and
//! checkpoints.
//!
//! A [`ModelState`] carries the parameters of any kind. The objectives in
//! [`objective`] are maximized; training minimizes their negation.

mod checkpoint;
pub mod generate;
pub mod objective;
pub mod state;

pub use checkpoint::FORMAT_VERSION;
pub use generate::{
    generate, generate_unconditional, pigpvae_decode, reconstruct, resample_conditions, Decoded, Generated, Reconstruction,
    UNCONDITIONAL_WARNING,
};
pub use objective::{
    gpvae_elbo, objective, objective_with_grad, pigpvae_loss, pivae_elbo, vae_elbo, LossBreakdown,
};
pub use state::{Alpha, AlphaConfig, Bound, KernelRaw, ModelConfig, ModelKind, ModelState, ObsSd};
