//! Sampling new curves and reconstructing observed ones.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::state::{ModelKind, ModelState};
use crate::data::{Mode, SeriesBatch};
use crate::error::{Error, Result};
use crate::gp::{self, channel_posterior_var, kernel_matrix_var};
use crate::nets::tape::concat_cols;
use crate::nets::{decode_delta, gaussian_heads, gp_heads_var, Mat, Tape, Var};
use crate::physics::{physical_decode, relative_progress, Condition};
use crate::rng;

/// Sd (°C) of the jitter added to resampled training conditions.
pub const CONDITION_JITTER_SD: f64 = 0.25;

pub const UNCONDITIONAL_WARNING: &str = "unconditional model ignores conditioning";

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub batch: SeriesBatch,
    pub warnings: Vec<String>,
}

/// A pigpvae decode in normalized units: `x_hat = x_phy + delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub x_hat: Vec<f64>,
    pub x_phy: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Physical decode plus the discrepancy correction. `z_delta` is `L × T`;
/// `None` (or a state without the branch) gives a zero correction.
pub fn pigpvae_decode(
    state: &ModelState,
    z_phy: f64,
    z_delta: Option<&Mat>,
    cond: Condition,
) -> Result<Decoded> {
    if !state.kind.is_conditional() {
        return Err(Error::Usage(format!("{} has no physical decoder", state.kind)));
    }
    let grid = state.time_grid();
    let x_phy = physical_decode(z_phy, &grid, cond, Some(&state.normalizer));
    let delta = match (&state.delta_decoder, z_delta) {
        (Some(net), Some(z)) => decode_delta(net, z, &relative_progress(z_phy, &grid))?,
        (Some(_), None) => return Err(Error::Usage("discrepancy latent missing".into())),
        (None, _) => vec![0.0; x_phy.len()],
    };
    let x_hat = x_phy.iter().zip(&delta).map(|(a, d)| a + d).collect();
    Ok(Decoded { x_hat, x_phy, delta })
}

fn check_conditions(mode: Mode, conds: &[Condition]) -> Result<()> {
    for c in conds {
        if !(c.t0.is_finite() && c.ts.is_finite()) || !mode.admits(c.t0, c.ts) {
            return Err(Error::Usage(format!(
                "condition (t0 {}, ts {}) is not a {mode} condition",
                c.t0, c.ts
            )));
        }
    }
    Ok(())
}

/// `n` conditions resampled from those seen in training, each jittered by
/// `N(0, 0.25²)` °C and kept consistent with the model's mode.
pub fn resample_conditions(state: &ModelState, n: usize, seed: u64) -> Result<Vec<Condition>> {
    if state.conditions.is_empty() {
        return Err(Error::Usage("model records no training conditions".into()));
    }
    let mut rng = rng::seeded(seed, rng::stream::CONDITIONS);
    let jitter = Normal::new(0.0, CONDITION_JITTER_SD).expect("positive sd");
    Ok((0..n)
        .map(|_| {
            let base = state.conditions[rng.random_range(0..state.conditions.len())];
            let t0 = base.t0 + jitter.sample(&mut rng);
            let mut ts = base.ts + jitter.sample(&mut rng);
            if !state.mode.admits(t0, ts) {
                ts = t0;
            }
            Condition { t0, ts }
        })
        .collect())
}

/// Surrounding temperature reported for an unconditionally generated curve:
/// the far end of its range in the direction of the mode.
fn implied_ts(mode: Mode, row: &[f64]) -> f64 {
    let (first, last) = (row[0], row[row.len() - 1]);
    match mode {
        Mode::Heating => first.max(last),
        Mode::Cooling => first.min(last),
    }
}

/// Draws `n_per_cond` curves for every condition, in °C.
///
/// Physics-conditioned models draw `z_phy` from the prior and the
/// discrepancy path from the GP prior under the trained kernel. The vae and
/// gpvae cannot condition: they draw `conds.len() · n_per_cond` curves from
/// their latent prior and report a warning.
pub fn generate(
    state: &ModelState,
    conds: &[Condition],
    n_per_cond: usize,
    seed: u64,
) -> Result<Generated> {
    state.require_trained()?;
    check_conditions(state.mode, conds)?;
    let total = conds.len() * n_per_cond;
    if total == 0 {
        return Err(Error::Usage("nothing to generate".into()));
    }
    let mut warnings = Vec::new();
    let norm = &state.normalizer;
    let grid = state.time_grid();
    let len = state.series_len;
    let mut values = Vec::with_capacity(total);
    let mut ts = Vec::with_capacity(total);
    let mut ids = Vec::with_capacity(total);

    match state.kind {
        ModelKind::Pivae | ModelKind::Pigpvae => {
            let mut phys = rng::seeded(seed, rng::stream::PHYSICS);
            let mut gp_rng = rng::seeded(seed, rng::stream::GP);
            let branch = state.delta_decoder.is_some();
            let prior_cov: Vec<Mat> = if branch {
                (0..state.latent_dims)
                    .map(|l| gp::kernel_matrix(&grid, &state.kernel_params(l)))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let mut clamped = 0;
            for (c, cond) in conds.iter().enumerate() {
                for j in 0..n_per_cond {
                    let z_phy = state.prior.mean + state.prior.sd * rng::normals(&mut phys, 1)[0];
                    let z_delta = if branch {
                        let mut z = Mat::zeros(state.latent_dims, len);
                        for (l, k) in prior_cov.iter().enumerate() {
                            let draw = gp::sample_rows(k, state.jitter, 1, &mut gp_rng)?;
                            z.row_mut(l).copy_from(&draw.row(0));
                        }
                        Some(z)
                    } else {
                        None
                    };
                    let decoded = pigpvae_decode(state, z_phy, z_delta.as_ref(), *cond)?;
                    let row: Vec<f64> = decoded.x_hat.iter().map(|&v| norm.invert(v)).collect();
                    let mut s = cond.ts;
                    if !state.mode.admits(row[0], s) {
                        s = row[0];
                        clamped += 1;
                    }
                    values.push(row);
                    ts.push(s);
                    ids.push(format!("gen_{c}_{j}"));
                }
            }
            if clamped > 0 {
                warnings.push(format!(
                    "{clamped} generated curves started beyond their ts; ts set to the start value"
                ));
            }
        }
        ModelKind::Vae | ModelKind::Gpvae => {
            let mut g = generate_unconditional(state, total, seed)?;
            if !conds.is_empty() {
                g.warnings.push(UNCONDITIONAL_WARNING.to_string());
            }
            return Ok(g);
        }
    }
    Ok(Generated {
        batch: SeriesBatch::new(ids, values, ts, state.mode)?,
        warnings,
    })
}

/// `n` curves from the latent prior of a vae or gpvae, in °C.
pub fn generate_unconditional(state: &ModelState, n: usize, seed: u64) -> Result<Generated> {
    state.require_trained()?;
    if n == 0 {
        return Err(Error::Usage("nothing to generate".into()));
    }
    let dec = match (state.kind, &state.decoder) {
        (ModelKind::Vae | ModelKind::Gpvae, Some(d)) => d,
        _ => return Err(Error::Usage(format!("{} generation needs conditions", state.kind))),
    };
    let grid = state.time_grid();
    let len = state.series_len;
    let l = state.latent_dims;
    let decoded = if state.kind == ModelKind::Vae {
        let mut latent = rng::seeded(seed, rng::stream::LATENT);
        let z = Mat::from_vec(n, l, rng::normals(&mut latent, n * l));
        dec.forward(&z)?
    } else {
        let mut gp_rng = rng::seeded(seed, rng::stream::GP);
        let covs: Vec<Mat> = (0..l)
            .map(|c| gp::kernel_matrix(&grid, &state.kernel_params(c)))
            .collect::<Result<_>>()?;
        let mut out = Mat::zeros(n, len);
        for i in 0..n {
            // pointwise decoder: rows are time steps, columns channels
            let mut z = Mat::zeros(len, l);
            for (c, k) in covs.iter().enumerate() {
                let draw = gp::sample_rows(k, state.jitter, 1, &mut gp_rng)?;
                z.column_mut(c).copy_from(&draw.row(0).transpose());
            }
            let curve = dec.forward(&z)?;
            out.row_mut(i).copy_from(&curve.column(0).transpose());
        }
        out
    };
    let norm = &state.normalizer;
    let mut values = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = decoded.row(i).iter().map(|&v| norm.invert(v)).collect();
        ts.push(implied_ts(state.mode, &row));
        values.push(row);
    }
    let ids = (0..n).map(|i| format!("gen_{i}")).collect();
    Ok(Generated {
        batch: SeriesBatch::new(ids, values, ts, state.mode)?,
        warnings: Vec::new(),
    })
}

/// Reconstructions of observed curves, in °C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub x_hat: Vec<Vec<f64>>,
    /// The physical component (pivae and pigpvae only).
    pub x_phy: Option<Vec<Vec<f64>>>,
    /// Posterior-mean rate `k` per curve (pivae and pigpvae only).
    pub rates: Option<Vec<f64>>,
}

/// Decodes the posterior-mean latents of every curve. Deterministic: no
/// sampling is involved.
pub fn reconstruct(state: &ModelState, batch: &SeriesBatch) -> Result<Reconstruction> {
    state.require_trained()?;
    if batch.series_len() != state.series_len || batch.mode() != state.mode {
        return Err(Error::Shape("batch does not match the model".into()));
    }
    let tape = Tape::new();
    let bound = state.bind(&tape);
    let rows = state.normalizer.apply_batch(batch);
    let (n, len) = (batch.len(), batch.series_len());
    let x = tape.leaf(Mat::from_fn(n, len, |i, j| rows[i][j]));
    let norm = &state.normalizer;
    let denorm = |m: &Mat| -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| m.row(i).iter().map(|&v| norm.invert(v)).collect())
            .collect()
    };

    // posterior means of the GP paths, T × L per curve
    let gp_means = |bound: &super::state::Bound<'_>| -> Result<Vec<Mat>> {
        let enc = bound.encoder.as_ref().expect("GP branch encoder");
        let out = enc.forward(x)?;
        let grid = state.time_grid();
        let ks: Vec<Var<'_>> = bound
            .kernels
            .iter()
            .map(|&(ls, var)| kernel_matrix_var(&tape, &grid, ls, var, state.jitter))
            .collect();
        (0..n)
            .map(|i| {
                let cols = gp_heads_var(out.row_at(i), state.latent_dims, len)
                    .into_iter()
                    .enumerate()
                    .map(|(l, (t, s))| {
                        let k = if ks.len() > 1 { ks[l] } else { ks[0] };
                        Ok(channel_posterior_var(k, t, s, state.jitter)?.mean)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(concat_cols(&cols).value())
            })
            .collect()
    };

    match state.kind {
        ModelKind::Vae => {
            let out = bound.encoder.as_ref().expect("vae encoder").forward(x)?;
            let mean = out.slice(0, 0, n, state.latent_dims);
            let x_hat = bound.decoder.as_ref().expect("vae decoder").forward(mean)?;
            Ok(Reconstruction {
                x_hat: denorm(&x_hat.value()),
                x_phy: None,
                rates: None,
            })
        }
        ModelKind::Gpvae => {
            let dec = state.decoder.as_ref().expect("gpvae decoder");
            let mut x_hat = Mat::zeros(n, len);
            for (i, z) in gp_means(&bound)?.iter().enumerate() {
                x_hat.row_mut(i).copy_from(&dec.forward(z)?.column(0).transpose());
            }
            Ok(Reconstruction {
                x_hat: denorm(&x_hat),
                x_phy: None,
                rates: None,
            })
        }
        ModelKind::Pivae | ModelKind::Pigpvae => {
            let out = bound.phys_encoder.as_ref().expect("physics encoder").forward(x)?;
            let (mean, _) = gaussian_heads(out.slice(0, 0, n, 1), out.slice(0, 1, n, 1));
            let z_phy = mean.value();
            let z_delta = match state.delta_decoder {
                Some(_) => Some(gp_means(&bound)?),
                None => None,
            };
            let conds = batch.conditions();
            let mut x_hat = Mat::zeros(n, len);
            let mut x_phy = Mat::zeros(n, len);
            for i in 0..n {
                let zd = z_delta.as_ref().map(|z| z[i].transpose());
                let d = pigpvae_decode(state, z_phy[(i, 0)], zd.as_ref(), conds[i])?;
                x_hat.row_mut(i).copy_from_slice(&d.x_hat);
                x_phy.row_mut(i).copy_from_slice(&d.x_phy);
            }
            Ok(Reconstruction {
                x_hat: denorm(&x_hat),
                x_phy: Some(denorm(&x_phy)),
                rates: Some(z_phy.iter().map(|&z| crate::nets::tape::softplus(z)).collect()),
            })
        }
    }
}
