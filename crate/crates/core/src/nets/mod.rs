//! Function approximators and the differentiation tape they run on.
//!
//! Encoders take a whole curve as one input row. The GP encoder emits a
//! target and a noise sd for every (channel, time step); the physics encoder
//! emits a mean and sd for the unconstrained rate latent. The discrepancy
//! decoder is applied pointwise in time with weights shared across steps.

pub mod mlp;
pub mod tape;

pub use mlp::{Activation, Mlp, MlpVars};
pub use tape::{Gradients, Mat, Tape, Var};

use crate::error::{Error, Result};
use crate::gp::PseudoObservations;
use tape::concat_cols;

/// Floor added to every sd head after the softplus.
pub const SD_FLOOR: f64 = 1e-6;

/// Independent Gaussian with per-dimension mean and sd.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.len() != sd.len() {
            return Err(Error::Shape("mean and sd lengths differ".into()));
        }
        if sd.iter().any(|&s| !(s >= SD_FLOOR)) {
            return Err(Error::Domain("sd below 1e-6".into()));
        }
        Ok(Self { mean, sd })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Splits a pre-activation into `(mean, softplus(sd) + floor)`.
pub fn gaussian_heads<'t>(mean: Var<'t>, sd_pre: Var<'t>) -> (Var<'t>, Var<'t>) {
    (mean, sd_pre.softplus() + SD_FLOOR)
}

/// Per-channel `(targets, noise_sd)` columns (T×1) from one encoder output
/// row of width `2·L·T`: the first `L·T` entries are targets laid out channel
/// by channel, the rest are sd pre-activations in the same layout.
pub fn gp_heads_var<'t>(row: Var<'t>, channels: usize, len: usize) -> Vec<(Var<'t>, Var<'t>)> {
    (0..channels)
        .map(|l| {
            let mean = row.slice(0, l * len, 1, len).t();
            let pre = row.slice(0, (channels + l) * len, 1, len).t();
            gaussian_heads(mean, pre)
        })
        .collect()
}

fn curve_row(net: &Mlp, x: &[f64]) -> Result<Mat> {
    if x.len() != net.input_width() {
        return Err(Error::Shape(format!(
            "encoder expects a curve of length {}, got {}",
            net.input_width(),
            x.len()
        )));
    }
    Ok(Mat::from_row_slice(1, x.len(), x))
}

/// Runs the GP encoder on one curve.
pub fn encode_gp(net: &Mlp, x: &[f64], channels: usize) -> Result<PseudoObservations> {
    let len = x.len();
    if net.output_width() != 2 * channels * len {
        return Err(Error::Shape(format!(
            "GP encoder output {} != 2·{channels}·{len}",
            net.output_width()
        )));
    }
    let tape = Tape::new();
    let out = net.bind(&tape).forward(tape.leaf(curve_row(net, x)?))?;
    let mut targets = Mat::zeros(channels, len);
    let mut noise = Mat::zeros(channels, len);
    for (l, (m, s)) in gp_heads_var(out, channels, len).into_iter().enumerate() {
        targets.row_mut(l).copy_from(&m.value().transpose());
        noise.row_mut(l).copy_from(&s.value().transpose());
    }
    PseudoObservations::new(targets, noise)
}

/// Runs the physics encoder on one curve; the result is over the
/// unconstrained rate latent.
pub fn encode_phys(net: &Mlp, x: &[f64]) -> Result<DiagGaussian> {
    if net.output_width() != 2 {
        return Err(Error::Shape("physics encoder must have two outputs".into()));
    }
    let tape = Tape::new();
    let out = net.bind(&tape).forward(tape.leaf(curve_row(net, x)?))?;
    let (m, s) = gaussian_heads(out.slice(0, 0, 1, 1), out.slice(0, 1, 1, 1));
    DiagGaussian::new(vec![m.item()], vec![s.item()])
}

/// Pointwise discrepancy: row `t` of the input is `(z[:, t], phys[t])`, where
/// `phys` is the physical reconstruction in curve-relative units
/// (see [`crate::physics::relative_progress`]). The network output is gated
/// by `phys[t]`, so the correction is exactly zero before the physical
/// response starts. `z` is T×L, `phys` is T×1, result is T×1.
pub fn decode_delta_var<'t>(net: &MlpVars<'t>, z: Var<'t>, phys: Var<'t>) -> Result<Var<'t>> {
    if z.shape().0 != phys.shape().0 {
        return Err(Error::Shape("latent and physical curve lengths differ".into()));
    }
    Ok(net.forward(concat_cols(&[z, phys]))? * phys)
}

/// Plain form of [`decode_delta_var`]; `z` is L×T.
pub fn decode_delta(net: &Mlp, z: &Mat, phys: &[f64]) -> Result<Vec<f64>> {
    if z.ncols() != phys.len() {
        return Err(Error::Shape(format!(
            "latent has {} steps, physical curve {}",
            z.ncols(),
            phys.len()
        )));
    }
    let tape = Tape::new();
    let out = decode_delta_var(
        &net.bind(&tape),
        tape.leaf(z.transpose()),
        tape.column(phys),
    )?;
    Ok(out.value().iter().copied().collect())
}
