//! Newton's law of heating and cooling as a decoder.
//!
//! `dT/dt = −k (T − Ts)` has the closed form `T(t) = (T0 − Ts) e^{−kt} + Ts`.
//! The rate `k` is the only latent quantity; it is carried as an
//! unconstrained value `z` with `k = softplus(z)`, and the Gaussian prior and
//! posterior over `z` live in that unconstrained space.

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::nets::tape::{softplus, softplus_inv, Mat, Tape, Var};
use crate::nets::DiagGaussian;

/// Gaussian prior over the unconstrained rate latent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl Default for PhysicalPrior {
    /// Centered on `k = 2` (about 86% of the way to `Ts` by `t = 1`).
    fn default() -> Self {
        Self {
            mean: softplus_inv(2.0),
            sd: 0.5,
        }
    }
}

impl PhysicalPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.sd > 0.0) || !self.mean.is_finite() || !self.sd.is_finite() {
            return Err(Error::Domain(format!("invalid physical prior {self:?}")));
        }
        Ok(())
    }

    /// Prior centered on a rate `k` in physical units.
    pub fn centered_on_rate(k: f64, sd: f64) -> Self {
        Self {
            mean: softplus_inv(k),
            sd,
        }
    }
}

/// Unconstrained rate latent and the positive rate it maps to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalLatent {
    pub raw: f64,
}

impl PhysicalLatent {
    pub fn from_rate(k: f64) -> Result<Self> {
        if !(k > 0.0) {
            return Err(Error::Domain(format!("rate must be positive, got {k}")));
        }
        Ok(Self {
            raw: softplus_inv(k),
        })
    }

    pub fn rate(&self) -> f64 {
        softplus(self.raw)
    }
}

/// Conditioning of one curve: initial and surrounding temperature in °C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub t0: f64,
    pub ts: f64,
}

/// `T(t) = (T0 − Ts)e^{−kt} + Ts`, evaluated as `T0 + (Ts − T0)(1 − e^{−kt})`
/// so that `T(0) = T0` exactly.
pub fn newton_solution(t: &[f64], t0: f64, ts: f64, k: f64) -> Vec<f64> {
    t.iter().map(|&ti| t0 - (ts - t0) * (-k * ti).exp_m1()).collect()
}

/// Tape form of [`newton_solution`]; `t0`, `ts` and `k` are 1×1, the result
/// is T×1.
pub fn newton_solution_var<'t>(
    tape: &'t Tape,
    t: &[f64],
    t0: Var<'t>,
    ts: Var<'t>,
    k: Var<'t>,
) -> Var<'t> {
    let n = t.len();
    let progress = ((tape.column(t).scale_by(k) * -1.0).exp() - 1.0) * -1.0;
    progress.scale_by(ts - t0) + t0.broadcast(n, 1)
}

/// `KL(N(μq, σq²) ‖ N(μp, σp²))` summed over dimensions.
pub fn kl_gauss_gauss(q: &DiagGaussian, p: &PhysicalPrior) -> Result<f64> {
    p.validate()?;
    if q.sd.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("posterior sd must be positive".into()));
    }
    Ok(q.mean
        .iter()
        .zip(&q.sd)
        .map(|(&mq, &sq)| kl_scalar(mq, sq, p.mean, p.sd))
        .sum())
}

fn kl_scalar(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
}

/// Tape form of [`kl_gauss_gauss`] for column `mean`/`sd` against a fixed
/// prior.
pub fn kl_gauss_gauss_var<'t>(mean: Var<'t>, sd: Var<'t>, prior: &PhysicalPrior) -> Var<'t> {
    let n = mean.shape().0 * mean.shape().1;
    let inv_two_var = 1.0 / (2.0 * prior.sd * prior.sd);
    let log_ratio = (sd.ln() * -1.0).sum() + n as f64 * prior.sd.ln();
    let quad = (sd.square() + (mean - prior.mean).square()).sum() * inv_two_var;
    log_ratio + quad - 0.5 * n as f64
}

/// `½ Σ (σ² + μ² − 1 − log σ²)`, the KL to a standard normal.
pub fn kl_standard_normal_var<'t>(mean: Var<'t>, sd: Var<'t>) -> Var<'t> {
    let var = sd.square();
    let n = var.shape().0 * var.shape().1;
    ((var + mean.square() - var.ln()).sum() - n as f64) * 0.5
}

/// Decodes an unconstrained rate sample into a curve in °C, or normalized
/// units when `normalizer` is given.
pub fn physical_decode(
    z_phy: f64,
    t: &[f64],
    cond: Condition,
    normalizer: Option<&Normalizer>,
) -> Vec<f64> {
    let curve = newton_solution(t, cond.t0, cond.ts, softplus(z_phy));
    match normalizer {
        Some(norm) => curve.into_iter().map(|x| norm.apply(x)).collect(),
        None => curve,
    }
}

/// Batched tape decode: `z` is n×1 unconstrained rates, result is n×T in
/// normalized units.
pub fn physical_decode_batch_var<'t>(
    tape: &'t Tape,
    z: Var<'t>,
    t: &[f64],
    conds: &[Condition],
    normalizer: &Normalizer,
) -> Var<'t> {
    let n = conds.len();
    let len = t.len();
    let gap = tape.leaf(Mat::from_fn(n, len, |i, _| conds[i].ts - conds[i].t0));
    let start = tape.leaf(Mat::from_fn(n, len, |i, _| conds[i].t0));
    let curve = relative_progress_var(tape, z, t) * gap + start;
    normalize_var(curve, normalizer)
}

/// Physical reconstruction in curve-relative units,
/// `(x̂_phy − T0) / (Ts − T0) = 1 − e^{−kt}`: zero at the start for every
/// condition and defined even when `Ts = T0`.
pub fn relative_progress(z_phy: f64, t: &[f64]) -> Vec<f64> {
    let k = softplus(z_phy);
    t.iter().map(|&ti| -(-k * ti).exp_m1()).collect()
}

/// Tape form of [`relative_progress`]: `z` is n×1, result n×T.
pub fn relative_progress_var<'t>(tape: &'t Tape, z: Var<'t>, t: &[f64]) -> Var<'t> {
    let decay = (z.softplus().matmul(tape.row(t)) * -1.0).exp();
    (decay - 1.0) * -1.0
}

pub(crate) fn normalize_var<'t>(x: Var<'t>, norm: &Normalizer) -> Var<'t> {
    (x - norm.shift) * (1.0 / norm.scale)
}
