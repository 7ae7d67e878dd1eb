//! Full-batch Adam training shared by all model kinds, and a central
//! finite-difference gradient checker.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::models::{objective_with_grad, LossBreakdown, ModelConfig, ModelState};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Log progress every this many epochs (0 = silent).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip: 10.0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |b: f64| b > 0.0 && b < 1.0;
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be ≥ 1".into()));
        }
        if !rate(self.beta1) || !rate(self.beta2) {
            return Err(Error::Domain("decay rates must lie in (0, 1)".into()));
        }
        if !(self.clip > 0.0) || !(self.eps > 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::Domain("clip and eps must be positive, learning rate ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Objective parts at the parameters *before* each epoch's update.
    pub history: Vec<LossBreakdown>,
    /// Global norm of the per-curve loss gradient, before clipping.
    pub grad_norms: Vec<f64>,
    pub clip: f64,
    pub state: ModelState,
    pub seconds: f64,
}

impl TrainTrace {
    /// Fraction of epochs after `warmup` in which the trailing `window`
    /// mean of the objective does not decrease.
    pub fn smoothed_improvement_fraction(&self, window: usize, warmup: usize) -> f64 {
        let totals: Vec<f64> = self.history.iter().map(|b| b.total).collect();
        let smooth: Vec<f64> = totals
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect();
        // smooth[i] covers epochs i..i+window
        let start = warmup.saturating_sub(window - 1).max(1);
        if start >= smooth.len() {
            return 1.0;
        }
        let steps = smooth.len() - start;
        let up = (start..smooth.len()).filter(|&i| smooth[i] >= smooth[i - 1]).count();
        up as f64 / steps as f64
    }

    /// Epochs within the last `n` whose gradient norm exceeded the clip.
    pub fn clip_events_in_last(&self, n: usize) -> usize {
        let from = self.grad_norms.len().saturating_sub(n);
        self.grad_norms[from..].iter().filter(|&&g| g > self.clip).count()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    /// Columns `epoch,total,recon,kl_phys,gp_entropy_term,log_z,reg`.
    pub fn write_csv_to(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,{}", LossBreakdown::TERMS.join(","))?;
        for (epoch, b) in self.history.iter().enumerate() {
            let vals: Vec<String> = b.values().iter().map(|v| v.to_string()).collect();
            writeln!(w, "{epoch},{}", vals.join(","))?;
        }
        w.flush()
    }
}

/// Initializes a model of `model.kind` on `batch` and trains it.
pub fn train(model: &ModelConfig, batch: &SeriesBatch, cfg: &TrainConfig) -> Result<TrainTrace> {
    let state = ModelState::init(model, batch, cfg.seed)?;
    train_state(state, batch, cfg)
}

/// Trains an existing state. Each epoch draws its reparameterization noise
/// from a seed derived from `(cfg.seed, epoch)`.
pub fn train_state(mut state: ModelState, batch: &SeriesBatch, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    let started = Instant::now();
    let mask = state.trainable_mask();
    let mut theta = state.flat_parameters();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let inv_n = 1.0 / batch.len() as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grad_norms = Vec::with_capacity(cfg.epochs);
    let (mut b1t, mut b2t) = (1.0, 1.0);
    for epoch in 0..cfg.epochs {
        let (parts, grad) = objective_with_grad(&state, batch, rng::derive(cfg.seed, epoch as u64))?;
        if let Some(term) = parts.non_finite_term() {
            return Err(Error::NonFinite {
                epoch,
                term: term.to_string(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                epoch,
                term: format!("gradient of {}", state.parameter_name(i)),
            });
        }
        // descend on −total / n
        let mut g: Vec<f64> = grad
            .iter()
            .zip(&mask)
            .map(|(&g, &on)| if on { -g * inv_n } else { 0.0 })
            .collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > cfg.clip {
            let s = cfg.clip / norm;
            g.iter_mut().for_each(|x| *x *= s);
        }
        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        for i in 0..theta.len() {
            if !mask[i] {
                continue;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - b1t);
            let v_hat = v[i] / (1.0 - b2t);
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        state.set_flat_parameters(&theta)?;
        if cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch + 1 == cfg.epochs) {
            info!(
                "{} epoch {epoch}: total {:.4} recon {:.4} |g| {norm:.3}",
                state.kind, parts.total, parts.recon
            );
        }
        history.push(parts);
        grad_norms.push(norm);
    }
    state.trained = true;
    let seconds = started.elapsed().as_secs_f64();
    debug!("{} trained {} epochs in {seconds:.1}s", state.kind, cfg.epochs);
    Ok(TrainTrace {
        history,
        grad_norms,
        clip: cfg.clip,
        state,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps round-off in
/// near-zero gradients from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares `grad` (as returned by `f`) with central differences of step
/// `h` at `x0`, for the coordinates in `indices` (all when `None`).
pub fn grad_check(
    f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: &[f64],
    indices: Option<&[usize]>,
    names: impl Fn(usize) -> String,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = f(x0)?;
    let all: Vec<usize> = (0..x0.len()).collect();
    let indices = indices.unwrap_or(&all);
    let mut x = x0.to_vec();
    let mut worst = (0.0, 0, 0.0, 0.0);
    for &i in indices {
        x[i] = x0[i] + h;
        let up = f(&x)?.0;
        x[i] = x0[i] - h;
        let down = f(&x)?.0;
        x[i] = x0[i];
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if !(err <= worst.0) {
            worst = (err, i, analytic[i], numeric);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        worst_name: names(worst.1),
        analytic: worst.2,
        numeric: worst.3,
        checked: indices.len(),
        tolerance,
        passed: worst.0 <= tolerance,
    })
}

/// [`grad_check`] of the model's objective with respect to its flat
/// parameters, under a fixed noise seed.
pub fn grad_check_model(
    state: &ModelState,
    batch: &SeriesBatch,
    seed: u64,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let f = |theta: &[f64]| {
        let mut s = state.clone();
        s.set_flat_parameters(theta)?;
        let (parts, grad) = objective_with_grad(&s, batch, seed)?;
        Ok((parts.total, grad))
    };
    grad_check(f, &state.flat_parameters(), None, |i| state.parameter_name(i), h, tolerance)
}
