//! The four variational objectives, recorded on a tape.
//!
//! Every objective is a *maximized* quantity summed over the curves of a
//! batch. Data enter in °C and are normalized with the state's normalizer;
//! reconstruction is an exact Gaussian log-likelihood with the trainable
//! observation sd.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::state::{Bound, ModelKind, ModelState};
use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::gp::{self, channel_posterior_var, expected_pseudo_loglik_var, kernel_matrix_var};
use crate::nets::tape::{concat_cols, concat_rows};
use crate::nets::{gaussian_heads, gp_heads_var, Mat, Tape, Var};
use crate::physics::{kl_gauss_gauss_var, kl_standard_normal_var, physical_decode_batch_var, relative_progress_var};
use crate::rng;

/// Itemized objective. Parts a kind does not use are exactly zero.
///
/// | kind    | total                                         |
/// |---------|-----------------------------------------------|
/// | vae     | recon − kl_phys (standard-normal KL)           |
/// | gpvae   | recon − gp_entropy_term + log_z                |
/// | pivae   | recon − kl_phys                                |
/// | pigpvae | recon − gp_entropy_term + log_z − kl_phys − reg |
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl_phys: f64,
    pub gp_entropy_term: f64,
    pub log_z: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 6] = ["total", "recon", "kl_phys", "gp_entropy_term", "log_z", "reg"];

    pub fn values(&self) -> [f64; 6] {
        [self.total, self.recon, self.kl_phys, self.gp_entropy_term, self.log_z, self.reg]
    }

    /// The signed sum of the parts, which equals `total` by construction.
    pub fn recombined(&self) -> f64 {
        self.recon - self.gp_entropy_term + self.log_z - self.kl_phys - self.reg
    }

    /// Name of the first non-finite part, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::TERMS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| *name)
    }
}

/// Tape handles for each part of the objective.
pub struct Terms<'t> {
    pub total: Var<'t>,
    pub recon: Option<Var<'t>>,
    pub kl_phys: Option<Var<'t>>,
    pub gp_entropy_term: Option<Var<'t>>,
    pub log_z: Option<Var<'t>>,
    pub reg: Option<Var<'t>>,
}

impl Terms<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        let get = |v: Option<Var<'_>>| v.map_or(0.0, |v| v.item());
        LossBreakdown {
            total: self.total.item(),
            recon: get(self.recon),
            kl_phys: get(self.kl_phys),
            gp_entropy_term: get(self.gp_entropy_term),
            log_z: get(self.log_z),
            reg: get(self.reg),
        }
    }
}

/// Standard-normal draws for one objective evaluation. Each latent family
/// has its own stream, so switching a branch off never shifts the draws of
/// another.
struct Noise {
    phys: rng::SeededRng,
    gp: rng::SeededRng,
    latent: rng::SeededRng,
}

impl Noise {
    fn new(seed: u64) -> Self {
        Self {
            phys: rng::seeded(seed, rng::stream::PHYSICS),
            gp: rng::seeded(seed, rng::stream::GP),
            latent: rng::seeded(seed, rng::stream::LATENT),
        }
    }
}

/// `Σ log N(x; x̂, σ²)` over all entries; `sd` is 1×1.
fn gaussian_loglik<'t>(x: Var<'t>, x_hat: Var<'t>, sd: Var<'t>) -> Var<'t> {
    let (r, c) = x.shape();
    let n = (r * c) as f64;
    let log_sd = sd.ln();
    let sq = (x - x_hat).square().sum();
    let inv_var = (log_sd * -2.0).exp();
    (sq * inv_var) * -0.5 - log_sd * n - 0.5 * n * (2.0 * PI).ln()
}

fn check_batch(state: &ModelState, batch: &SeriesBatch) -> Result<()> {
    if batch.series_len() != state.series_len {
        return Err(Error::Shape(format!(
            "model expects curves of length {}, batch has {}",
            state.series_len,
            batch.series_len()
        )));
    }
    if batch.mode() != state.mode {
        return Err(Error::Usage(format!(
            "{} model applied to a {} batch",
            state.mode,
            batch.mode()
        )));
    }
    Ok(())
}

fn normalized_leaf<'t>(tape: &'t Tape, state: &ModelState, batch: &SeriesBatch) -> Var<'t> {
    let rows = state.normalizer.apply_batch(batch);
    tape.leaf(Mat::from_fn(batch.len(), batch.series_len(), |i, j| rows[i][j]))
}

/// GP-branch quantities for every curve: posterior mean and covariance per
/// channel, plus the summed entropy term and `log Z`.
struct GpBranch<'t> {
    posteriors: Vec<Vec<(Var<'t>, Var<'t>)>>,
    entropy: Var<'t>,
    log_z: Var<'t>,
}

fn gp_branch<'t>(
    tape: &'t Tape,
    state: &ModelState,
    bound: &Bound<'t>,
    x: Var<'t>,
) -> Result<GpBranch<'t>> {
    let (n, len) = x.shape();
    let channels = state.latent_dims;
    let grid = state.time_grid();
    let enc = bound.encoder.as_ref().expect("GP branch needs an encoder");
    let out = enc.forward(x)?;
    let kernels: Vec<Var<'t>> = bound
        .kernels
        .iter()
        .map(|&(ls, var)| kernel_matrix_var(tape, &grid, ls, var, state.jitter))
        .collect();
    let kernel = |l: usize| if kernels.len() > 1 { kernels[l] } else { kernels[0] };
    let mut posteriors = Vec::with_capacity(n);
    let mut entropy = Vec::new();
    let mut log_z = Vec::new();
    for i in 0..n {
        let heads = gp_heads_var(out.row_at(i), channels, len);
        let mut per_channel = Vec::with_capacity(channels);
        for (l, (targets, noise_sd)) in heads.into_iter().enumerate() {
            let post = channel_posterior_var(kernel(l), targets, noise_sd, state.jitter)?;
            entropy.push(expected_pseudo_loglik_var(post.mean, post.cov, targets, noise_sd));
            log_z.push(post.log_z);
            per_channel.push((post.mean, post.cov));
        }
        posteriors.push(per_channel);
    }
    Ok(GpBranch {
        posteriors,
        entropy: concat_rows(&entropy).sum(),
        log_z: concat_rows(&log_z).sum(),
    })
}

impl<'t> GpBranch<'t> {
    /// One reparameterized path per curve, each `T × L`.
    fn sample(&self, noise: &mut rng::SeededRng, jitter: f64) -> Result<Vec<Var<'t>>> {
        self.posteriors
            .iter()
            .map(|channels| {
                let cols = channels
                    .iter()
                    .map(|&(mean, cov)| {
                        let eps = rng::normals(noise, mean.shape().0);
                        gp::posterior_sample_var(mean, cov, &eps, jitter)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(concat_cols(&cols))
            })
            .collect()
    }
}

/// Applies a pointwise network to per-curve `T × d` inputs in one pass and
/// returns the `n × T` result.
fn pointwise<'t>(net: &crate::nets::MlpVars<'t>, inputs: &[Var<'t>]) -> Result<Var<'t>> {
    let len = inputs[0].shape().0;
    let out = net.forward(concat_rows(inputs))?;
    let rows: Vec<Var<'t>> = (0..inputs.len())
        .map(|i| out.slice(i * len, 0, len, 1).t())
        .collect();
    Ok(concat_rows(&rows))
}

/// Mean over draws of a list of per-draw scalars.
fn mean_of<'t>(draws: &[Var<'t>]) -> Var<'t> {
    let s = concat_rows(draws).sum();
    if draws.len() == 1 {
        s
    } else {
        s * (1.0 / draws.len() as f64)
    }
}

/// Records the objective of `state.kind` on `tape`.
pub fn record<'t>(
    tape: &'t Tape,
    state: &ModelState,
    bound: &Bound<'t>,
    batch: &SeriesBatch,
    seed: u64,
) -> Result<Terms<'t>> {
    check_batch(state, batch)?;
    let x = normalized_leaf(tape, state, batch);
    let (n, len) = x.shape();
    let samples = state.samples;
    let mut noise = Noise::new(seed);
    match state.kind {
        ModelKind::Vae => {
            let l = state.latent_dims;
            let enc = bound.encoder.as_ref().expect("vae has an encoder");
            let dec = bound.decoder.as_ref().expect("vae has a decoder");
            let out = enc.forward(x)?;
            let (mean, sd) = gaussian_heads(out.slice(0, 0, n, l), out.slice(0, l, n, l));
            let kl = kl_standard_normal_var(mean, sd);
            let mut recon = Vec::with_capacity(samples);
            for _ in 0..samples {
                let eps = Mat::from_vec(n, l, rng::normals(&mut noise.latent, n * l));
                let z = mean + sd * tape.leaf(eps);
                recon.push(gaussian_loglik(x, dec.forward(z)?, bound.obs_sd));
            }
            let recon = mean_of(&recon);
            Ok(Terms {
                total: recon - kl,
                recon: Some(recon),
                kl_phys: Some(kl),
                gp_entropy_term: None,
                log_z: None,
                reg: None,
            })
        }
        ModelKind::Gpvae => {
            let dec = bound.decoder.as_ref().expect("gpvae has a decoder");
            let branch = gp_branch(tape, state, bound, x)?;
            let mut recon = Vec::with_capacity(samples);
            for _ in 0..samples {
                let paths = branch.sample(&mut noise.gp, state.jitter)?;
                recon.push(gaussian_loglik(x, pointwise(dec, &paths)?, bound.obs_sd));
            }
            let recon = mean_of(&recon);
            Ok(Terms {
                total: recon - branch.entropy + branch.log_z,
                recon: Some(recon),
                kl_phys: None,
                gp_entropy_term: Some(branch.entropy),
                log_z: Some(branch.log_z),
                reg: None,
            })
        }
        ModelKind::Pivae | ModelKind::Pigpvae => {
            let conds = batch.conditions();
            let grid = state.time_grid();
            let enc = bound.phys_encoder.as_ref().expect("physics encoder");
            let out = enc.forward(x)?;
            let (mean, sd) = gaussian_heads(out.slice(0, 0, n, 1), out.slice(0, 1, n, 1));
            let kl = kl_gauss_gauss_var(mean, sd, &state.prior);
            let branch = match (&bound.delta_decoder, state.kind) {
                (Some(_), ModelKind::Pigpvae) => Some(gp_branch(tape, state, bound, x)?),
                _ => None,
            };
            let mut recon = Vec::with_capacity(samples);
            let mut reg = Vec::with_capacity(samples);
            for _ in 0..samples {
                let eps = tape.column(&rng::normals(&mut noise.phys, n));
                let z = mean + sd * eps;
                let x_phy = physical_decode_batch_var(tape, z, &grid, &conds, &state.normalizer);
                let x_hat = match &branch {
                    Some(b) => {
                        let net = bound.delta_decoder.as_ref().expect("checked above");
                        let paths = b.sample(&mut noise.gp, state.jitter)?;
                        let phys = relative_progress_var(tape, z, &grid);
                        let inputs: Vec<Var<'t>> = paths
                            .iter()
                            .enumerate()
                            .map(|(i, &z)| concat_cols(&[z, phys.row_at(i).t()]))
                            .collect();
                        x_phy + pointwise(net, &inputs)? * phys
                    }
                    None => x_phy,
                };
                recon.push(gaussian_loglik(x, x_hat, bound.obs_sd));
                if state.kind == ModelKind::Pigpvae {
                    // Σ_i mean_t (x − x̂_phy)²
                    reg.push((x - x_phy).square().sum() * (1.0 / len as f64));
                }
            }
            let recon = mean_of(&recon);
            if state.kind == ModelKind::Pivae {
                return Ok(Terms {
                    total: recon - kl,
                    recon: Some(recon),
                    kl_phys: Some(kl),
                    gp_entropy_term: None,
                    log_z: None,
                    reg: None,
                });
            }
            let reg = mean_of(&reg).scale_by(bound.alpha);
            let (entropy, log_z) = match &branch {
                Some(b) => (Some(b.entropy), Some(b.log_z)),
                None => (None, None),
            };
            let mut total = recon - kl - reg;
            if let Some(b) = &branch {
                total = total - b.entropy + b.log_z;
            }
            Ok(Terms {
                total,
                recon: Some(recon),
                kl_phys: Some(kl),
                gp_entropy_term: entropy,
                log_z,
                reg: Some(reg),
            })
        }
    }
}

/// Evaluates the objective of `state.kind`.
pub fn objective(state: &ModelState, batch: &SeriesBatch, seed: u64) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bound = state.bind(&tape);
    Ok(record(&tape, state, &bound, batch, seed)?.breakdown())
}

/// The objective together with `∂total/∂θ`, flattened in the order of
/// [`ModelState::flat_parameters`].
pub fn objective_with_grad(
    state: &ModelState,
    batch: &SeriesBatch,
    seed: u64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let tape = Tape::new();
    let bound = state.bind(&tape);
    let terms = record(&tape, state, &bound, batch, seed)?;
    let grads = tape.gradients(terms.total);
    Ok((terms.breakdown(), bound.flat_gradient(&grads)))
}

fn checked(kind: ModelKind, state: &ModelState, batch: &SeriesBatch, seed: u64) -> Result<LossBreakdown> {
    state.require_kind(kind)?;
    objective(state, batch, seed)
}

pub fn vae_elbo(state: &ModelState, batch: &SeriesBatch, seed: u64) -> Result<LossBreakdown> {
    checked(ModelKind::Vae, state, batch, seed)
}

pub fn gpvae_elbo(state: &ModelState, batch: &SeriesBatch, seed: u64) -> Result<LossBreakdown> {
    checked(ModelKind::Gpvae, state, batch, seed)
}

pub fn pivae_elbo(state: &ModelState, batch: &SeriesBatch, seed: u64) -> Result<LossBreakdown> {
    checked(ModelKind::Pivae, state, batch, seed)
}

pub fn pigpvae_loss(state: &ModelState, batch: &SeriesBatch, seed: u64) -> Result<LossBreakdown> {
    checked(ModelKind::Pigpvae, state, batch, seed)
}
