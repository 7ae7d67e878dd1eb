//! Gaussian-process numerics for the latent temporal prior.
//!
//! The encoder of a GP-prior VAE emits, for every latent channel, a target
//! value and a noise level per time step. Those pseudo-observations are
//! conditioned on exactly under a squared-exponential prior, which yields the
//! approximate posterior over the latent path and the normalizer `log Z`
//! that enters the objective.
//!
//! Every routine has a tape form (`*_var`) that the objectives differentiate
//! through, and a plain form used for evaluation and tests. The plain forms
//! evaluate the tape forms, so there is exactly one implementation of the
//! algebra.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::tape::{Mat, Tape, Var};
use crate::rng;

/// Multiplier applied to the jitter on the single retry after a failed
/// factorization.
pub const JITTER_ESCALATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    pub lengthscale: f64,
    pub variance: f64,
    pub jitter: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            lengthscale: 0.2,
            variance: 1.0,
            jitter: 1e-6,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.lengthscale) || !ok(self.variance) || !ok(self.jitter) {
            return Err(Error::Domain(format!(
                "kernel parameters must be positive: {self:?}"
            )));
        }
        if self.jitter > 1e-3 {
            return Err(Error::Domain(format!("jitter {} exceeds 1e-3", self.jitter)));
        }
        Ok(())
    }
}

/// Per-channel regression targets and heteroscedastic noise emitted by an
/// encoder. Both matrices are `L × T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoObservations {
    pub targets: Mat,
    pub noise_sd: Mat,
}

impl PseudoObservations {
    pub const MIN_NOISE_SD: f64 = 1e-6;

    pub fn new(targets: Mat, noise_sd: Mat) -> Result<Self> {
        if targets.shape() != noise_sd.shape() {
            return Err(Error::Shape(format!(
                "targets {:?} vs noise {:?}",
                targets.shape(),
                noise_sd.shape()
            )));
        }
        if noise_sd.iter().any(|&s| !(s >= Self::MIN_NOISE_SD)) {
            return Err(Error::Domain("pseudo-observation noise below 1e-6".into()));
        }
        Ok(Self { targets, noise_sd })
    }

    pub fn channels(&self) -> usize {
        self.targets.nrows()
    }

    pub fn len(&self) -> usize {
        self.targets.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Exact posterior of the latent paths: an `L × T` mean and one `T × T`
/// covariance per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub mean: Mat,
    pub cov: Vec<Mat>,
    pub jitter: f64,
}

fn check_grid(time_grid: &[f64]) -> Result<()> {
    if time_grid.is_empty() {
        return Err(Error::Shape("empty time grid".into()));
    }
    if time_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("time grid must be strictly increasing".into()));
    }
    Ok(())
}

/// `−½ (tᵢ − tⱼ)²`, the fixed part of the squared-exponential exponent.
pub fn half_sq_dist(time_grid: &[f64]) -> Mat {
    let n = time_grid.len();
    Mat::from_fn(n, n, |i, j| {
        let d = time_grid[i] - time_grid[j];
        -0.5 * d * d
    })
}

/// `K = s² exp(−(tᵢ−tⱼ)²/(2ℓ²)) + jitter·I`, differentiable in `ℓ` and `s²`
/// (both 1×1).
pub fn kernel_matrix_var<'t>(
    tape: &'t Tape,
    time_grid: &[f64],
    lengthscale: Var<'t>,
    variance: Var<'t>,
    jitter: f64,
) -> Var<'t> {
    let n = time_grid.len();
    let inv_sq = (lengthscale.ln() * -2.0).exp();
    let d = tape.leaf(half_sq_dist(time_grid));
    let jit = tape.leaf(Mat::identity(n, n) * jitter);
    d.scale_by(inv_sq).exp().scale_by(variance) + jit
}

pub fn kernel_matrix(time_grid: &[f64], params: &KernelParams) -> Result<Mat> {
    check_grid(time_grid)?;
    params.validate()?;
    let tape = Tape::new();
    let k = kernel_matrix_var(
        &tape,
        time_grid,
        tape.scalar(params.lengthscale),
        tape.scalar(params.variance),
        params.jitter,
    );
    Ok(k.value())
}

/// `(A⁻¹B, log det A)` through a Cholesky factor of `A`.
pub fn chol_solve_var<'t>(a: Var<'t>, b: Var<'t>, retry_jitter: f64) -> Result<(Var<'t>, Var<'t>)> {
    let l = a.cholesky(retry_jitter)?;
    let x = l.solve_lower_t(l.solve_lower(b));
    let logdet = l.diag_part().ln().sum() * 2.0;
    Ok((x, logdet))
}

/// Plain form of [`chol_solve_var`]. `retry_jitter` is added to the diagonal
/// if the first factorization fails.
pub fn chol_solve(a: &Mat, b: &Mat, retry_jitter: f64) -> Result<(Mat, f64)> {
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::Shape(format!("chol_solve: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let tape = Tape::new();
    let (x, logdet) = chol_solve_var(tape.leaf(a.clone()), tape.leaf(b.clone()), retry_jitter)?;
    Ok((x.value(), logdet.item()))
}

/// Posterior quantities for one latent channel.
pub struct ChannelPosterior<'t> {
    /// T×1 posterior mean `K(K+D)⁻¹x̃`.
    pub mean: Var<'t>,
    /// T×T posterior covariance `K − K(K+D)⁻¹K`.
    pub cov: Var<'t>,
    /// `log N(x̃; 0, K + D)`.
    pub log_z: Var<'t>,
}

/// Conditions the prior `k` (T×T) on targets `x̃` with noise sds `σ̃`
/// (both T×1).
pub fn channel_posterior_var<'t>(
    k: Var<'t>,
    targets: Var<'t>,
    noise_sd: Var<'t>,
    jitter: f64,
) -> Result<ChannelPosterior<'t>> {
    let n = targets.shape().0;
    let a = k + noise_sd.square().diag();
    let l = a.cholesky(jitter * JITTER_ESCALATION)?;
    let w = l.solve_lower(targets);
    let alpha = l.solve_lower_t(w);
    let v = l.solve_lower(k);
    let half_logdet = l.diag_part().ln().sum();
    let log_z = (w.square().sum() * -0.5 - half_logdet) - 0.5 * n as f64 * (2.0 * PI).ln();
    let mean = k.matmul(alpha);
    let cov = k - v.t().matmul(v);
    Ok(ChannelPosterior { mean, cov, log_z })
}

/// `E_q[log Π_t N(x̃_t; z_t, σ̃_t²)]` under a posterior with the given mean
/// and covariance, in closed form:
/// `Σ_t log N(x̃_t; m_t, σ̃_t²) − s_t²/(2σ̃_t²)`.
pub fn expected_pseudo_loglik_var<'t>(
    mean: Var<'t>,
    cov: Var<'t>,
    targets: Var<'t>,
    noise_sd: Var<'t>,
) -> Var<'t> {
    let n = targets.shape().0;
    let log_sd = noise_sd.ln();
    let inv_var = (log_sd * -2.0).exp();
    let resid = (targets - mean).square() + cov.diag_part();
    (resid * inv_var).sum() * -0.5 - log_sd.sum() - 0.5 * n as f64 * (2.0 * PI).ln()
}

/// Reparameterized draw `m + chol(Σ + jitter·I) ε`.
pub fn posterior_sample_var<'t>(
    mean: Var<'t>,
    cov: Var<'t>,
    eps: &[f64],
    jitter: f64,
) -> Result<Var<'t>> {
    let tape = mean.tape();
    let n = eps.len();
    let stabilized = cov + tape.leaf(Mat::identity(n, n) * jitter);
    let l = stabilized.cholesky(jitter * JITTER_ESCALATION)?;
    Ok(mean + l.matmul(tape.column(eps)))
}

fn check_pseudo(time_grid: &[f64], pseudo: &PseudoObservations) -> Result<()> {
    check_grid(time_grid)?;
    if pseudo.len() != time_grid.len() {
        return Err(Error::Shape(format!(
            "pseudo-observations have {} steps, grid has {}",
            pseudo.len(),
            time_grid.len()
        )));
    }
    Ok(())
}

fn bind_channel<'t>(tape: &'t Tape, pseudo: &PseudoObservations, l: usize) -> (Var<'t>, Var<'t>) {
    let x = tape.leaf(pseudo.targets.row(l).transpose().resize(pseudo.len(), 1, 0.0));
    let s = tape.leaf(pseudo.noise_sd.row(l).transpose().resize(pseudo.len(), 1, 0.0));
    (x, s)
}

pub fn gp_posterior(
    time_grid: &[f64],
    pseudo: &PseudoObservations,
    params: &KernelParams,
) -> Result<GpPosterior> {
    check_pseudo(time_grid, pseudo)?;
    params.validate()?;
    let tape = Tape::new();
    let k = kernel_matrix_var(
        &tape,
        time_grid,
        tape.scalar(params.lengthscale),
        tape.scalar(params.variance),
        params.jitter,
    );
    let mut mean = Mat::zeros(pseudo.channels(), pseudo.len());
    let mut cov = Vec::with_capacity(pseudo.channels());
    for l in 0..pseudo.channels() {
        let (x, s) = bind_channel(&tape, pseudo, l);
        let post = channel_posterior_var(k, x, s, params.jitter)?;
        mean.row_mut(l).copy_from(&post.mean.value().transpose());
        let c = post.cov.value();
        cov.push((&c + c.transpose()) * 0.5);
    }
    Ok(GpPosterior {
        mean,
        cov,
        jitter: params.jitter,
    })
}

/// `Σ_l log N(x̃_l; 0, K + D_l)`, summed in channel order.
pub fn gp_log_marginal(
    time_grid: &[f64],
    pseudo: &PseudoObservations,
    params: &KernelParams,
) -> Result<f64> {
    check_pseudo(time_grid, pseudo)?;
    params.validate()?;
    let tape = Tape::new();
    let k = kernel_matrix_var(
        &tape,
        time_grid,
        tape.scalar(params.lengthscale),
        tape.scalar(params.variance),
        params.jitter,
    );
    let mut total = 0.0;
    for l in 0..pseudo.channels() {
        let (x, s) = bind_channel(&tape, pseudo, l);
        total += channel_posterior_var(k, x, s, params.jitter)?.log_z.item();
    }
    Ok(total)
}

/// `channels` independent draws from the zero-mean prior, one per row.
pub fn sample_prior(
    time_grid: &[f64],
    params: &KernelParams,
    channels: usize,
    seed: u64,
) -> Result<Mat> {
    let k = kernel_matrix(time_grid, params)?;
    let mut rng = rng::seeded(seed, rng::stream::GP);
    sample_rows(&k, params.jitter, channels, &mut rng)
}

pub(crate) fn sample_rows(
    cov: &Mat,
    jitter: f64,
    rows: usize,
    rng: &mut rng::SeededRng,
) -> Result<Mat> {
    let n = cov.nrows();
    let l = factor_with_retry(&(cov + Mat::identity(n, n) * jitter), jitter)?;
    let mut out = Mat::zeros(rows, n);
    for r in 0..rows {
        let eps = Mat::from_vec(n, 1, rng::normals(rng, n));
        out.row_mut(r).copy_from(&(&l * eps).transpose());
    }
    Ok(out)
}

pub(crate) fn factor_with_retry(a: &Mat, jitter: f64) -> Result<Mat> {
    let tape = Tape::new();
    Ok(tape.leaf(a.clone()).cholesky(jitter * JITTER_ESCALATION)?.value())
}

/// One draw per channel from the posterior.
pub fn sample_posterior(posterior: &GpPosterior, seed: u64) -> Result<Mat> {
    let mut rng = rng::seeded(seed, rng::stream::GP);
    let mut out = posterior.mean.clone();
    for (l, cov) in posterior.cov.iter().enumerate() {
        let draw = sample_rows(cov, posterior.jitter, 1, &mut rng)?;
        let mut row = out.row_mut(l);
        row += draw.row(0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect()
    }

    #[test]
    fn kernel_diagonal_and_unit_distance() {
        let p = KernelParams {
            lengthscale: 0.3,
            variance: 1.0,
            jitter: 1e-6,
        };
        let k = kernel_matrix(&[0.0, 0.3], &p).unwrap();
        assert_relative_eq!(k[(0, 0)], 1.0 + 1e-6, epsilon = 1e-15);
        assert_relative_eq!(k[(0, 1)], (-0.5f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(k[(0, 1)], 0.60653, epsilon = 1e-5);
        assert_eq!(k[(0, 1)], k[(1, 0)]);
    }

    #[test]
    fn kernel_long_lengthscale_is_constant() {
        let p = KernelParams {
            lengthscale: 1e6,
            variance: 2.5,
            jitter: 1e-6,
        };
        let k = kernel_matrix(&grid(6), &p).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert!((k[(i, j)] - 2.5).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn kernel_rejects_bad_params() {
        let p = KernelParams { lengthscale: 0.0, ..KernelParams::default() };
        assert!(matches!(kernel_matrix(&grid(3), &p), Err(Error::Domain(_))));
        let p = KernelParams { jitter: 1e-2, ..KernelParams::default() };
        assert!(kernel_matrix(&grid(3), &p).is_err());
        assert!(kernel_matrix(&[0.0, 0.0], &KernelParams::default()).is_err());
    }

    #[test]
    fn chol_solve_identity_and_diagonal() {
        let b = Mat::from_row_slice(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
        let (x, logdet) = chol_solve(&Mat::identity(2, 2), &b, 1e-6).unwrap();
        assert_eq!(x, b);
        assert_eq!(logdet, 0.0);
        let d = Mat::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let (_, logdet) = chol_solve(&d, &Mat::zeros(2, 1), 1e-6).unwrap();
        assert_relative_eq!(logdet, 36f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(logdet, 3.5835, epsilon = 1e-4);
    }

    #[test]
    fn chol_solve_reports_minor_after_escalation() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        let err = chol_solve(&a, &Mat::zeros(2, 1), 1e-5).unwrap_err();
        assert!(matches!(err, Error::Numerical { minor: 1, .. }));
    }

    #[test]
    fn scalar_conjugacy() {
        // K = [[1]] (jitter kept negligible), σ̃² = 1, x̃ = 2 → m = 1, cov = 0.5
        let p = KernelParams {
            lengthscale: 1.0,
            variance: 1.0 - 1e-12,
            jitter: 1e-12,
        };
        let pseudo = PseudoObservations::new(
            Mat::from_element(1, 1, 2.0),
            Mat::from_element(1, 1, 1.0),
        )
        .unwrap();
        let post = gp_posterior(&[0.0], &pseudo, &p).unwrap();
        assert_relative_eq!(post.mean[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(post.cov[0][(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn log_marginal_standard_normal_at_zero() {
        let p = KernelParams {
            lengthscale: 1.0,
            variance: 1.0 - 1e-6,
            jitter: 1e-6,
        };
        let pseudo = PseudoObservations::new(
            Mat::zeros(1, 1),
            Mat::from_element(1, 1, PseudoObservations::MIN_NOISE_SD),
        )
        .unwrap();
        let lz = gp_log_marginal(&[0.0], &pseudo, &p).unwrap();
        assert_relative_eq!(lz, -0.5 * (2.0 * PI).ln(), epsilon = 1e-11);
        assert_relative_eq!(lz, -0.91894, epsilon = 1e-5);
    }

    #[test]
    fn log_marginal_zero_targets_is_half_logdet() {
        let g = grid(5);
        let p = KernelParams::default();
        let sd = Mat::from_fn(2, 5, |l, t| 0.1 + 0.05 * (l + t) as f64);
        let pseudo = PseudoObservations::new(Mat::zeros(2, 5), sd.clone()).unwrap();
        let lz = gp_log_marginal(&g, &pseudo, &p).unwrap();
        let k = kernel_matrix(&g, &p).unwrap();
        let mut expected = 0.0;
        for l in 0..2 {
            let a = &k + Mat::from_diagonal(&sd.row(l).transpose().map(|s| s * s));
            expected -= 0.5 * (a * 2.0 * PI).determinant().ln();
        }
        assert_relative_eq!(lz, expected, epsilon = 1e-10);
    }

    #[test]
    fn prior_sample_is_deterministic() {
        let g = grid(8);
        let p = KernelParams::default();
        assert_eq!(
            sample_prior(&g, &p, 3, 11).unwrap(),
            sample_prior(&g, &p, 3, 11).unwrap()
        );
        assert_ne!(
            sample_prior(&g, &p, 3, 11).unwrap(),
            sample_prior(&g, &p, 3, 12).unwrap()
        );
    }

    #[test]
    fn pseudo_observations_validate() {
        assert!(PseudoObservations::new(Mat::zeros(1, 3), Mat::zeros(1, 3)).is_err());
        assert!(PseudoObservations::new(Mat::zeros(1, 3), Mat::from_element(1, 2, 1.0)).is_err());
    }
}
