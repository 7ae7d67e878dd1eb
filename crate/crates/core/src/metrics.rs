//! Two-sample evaluation of generated against real curves.
//!
//! Curves are compared as flat vectors (MMD), through their cross-timestep
//! correlation structure (CD), and through per-timestep histograms (MDD).
//! PCA and density tables are exported for plotting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::warn;
use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::data::{Mode, SeriesBatch};
use crate::error::{Error, Result};
use crate::models::generate::UNCONDITIONAL_WARNING;
use crate::models::{generate, resample_conditions, Generated, ModelKind, ModelState};
use crate::nets::Mat;
use crate::rng;

pub const DEFAULT_BINS: usize = 50;
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

fn check_rows(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<usize> {
    let len = x.first().or(y.first()).map_or(0, Vec::len);
    if x.iter().chain(y).any(|r| r.len() != len) {
        return Err(Error::Shape("all curves must share one length".into()));
    }
    Ok(len)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Median Euclidean distance over distinct pairs of the pooled set.
pub fn median_heuristic(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mmd {
    pub mmd2: f64,
    pub bandwidth: f64,
}

/// Unbiased squared MMD with kernel `exp(−‖a − b‖² / (2σ²))`:
/// off-diagonal within-set means plus `−2/(n·m)` times the cross sum.
/// `bandwidth = None` selects the median heuristic. May be negative.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: Option<f64>) -> Result<Mmd> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Usage("MMD needs at least two curves per set".into()));
    }
    check_rows(x, y)?;
    let sigma = match bandwidth {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(Error::Domain(format!("bandwidth must be positive, got {s}"))),
        None => {
            let m = median_heuristic(x, y);
            if m > BANDWIDTH_FLOOR {
                m
            } else {
                warn!("zero median distance; MMD bandwidth floored at {BANDWIDTH_FLOOR}");
                BANDWIDTH_FLOOR
            }
        }
    };
    let g = -0.5 / (sigma * sigma);
    let k = |a: &[f64], b: &[f64]| (g * sq_dist(a, b)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += k(&s[i], &s[j]);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    let mmd2 = within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64;
    Ok(Mmd {
        mmd2,
        bandwidth: sigma,
    })
}

/// Pearson correlation across samples for every pair of time steps;
/// `None` where either step is constant.
pub fn correlation_matrix(x: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    let len = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..len).map(|t| x.iter().map(|r| r[t]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = (0..len)
        .map(|t| x.iter().map(|r| r[t] - mean[t]).collect())
        .collect();
    let norm: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    (0..len)
        .map(|i| {
            (0..len)
                .map(|j| {
                    if norm[i] == 0.0 || norm[j] == 0.0 {
                        return None;
                    }
                    let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                    Some((dot / (norm[i] * norm[j])).clamp(-1.0, 1.0))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDifference {
    pub cd: f64,
    /// Ordered `(i, j)` pairs left out because a step is constant in either set.
    pub skipped_pairs: usize,
}

/// `Σ_{i,j} |ρ_ij − ρ̂_ij|` over timestep pairs.
pub fn correlation_difference(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<CorrelationDifference> {
    if x.len() < 3 || y.len() < 3 {
        return Err(Error::Usage("CD needs at least three curves per set".into()));
    }
    check_rows(x, y)?;
    let (a, b) = (correlation_matrix(x), correlation_matrix(y));
    let mut cd = 0.0;
    let mut skipped = 0;
    for (ra, rb) in a.iter().zip(&b) {
        for (&p, &q) in ra.iter().zip(rb) {
            match (p, q) {
                (Some(p), Some(q)) => cd += (p - q).abs(),
                _ => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        warn!("correlation difference skipped {skipped} pairs involving constant steps");
    }
    Ok(CorrelationDifference {
        cd,
        skipped_pairs: skipped,
    })
}

/// Shared equal-width edges `lo + (hi − lo)·b/bins` for one time step, or
/// `None` when the pooled range is degenerate.
fn pooled_range(x: &[Vec<f64>], y: &[Vec<f64>], t: usize) -> Option<(f64, f64)> {
    let vals = x.iter().chain(y).map(|r| r[t]);
    let lo = vals.clone().fold(f64::INFINITY, f64::min);
    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
    (hi > lo).then_some((lo, hi))
}

fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo) * bins as f64).floor() as usize).min(bins - 1)
}

fn histogram(rows: &[Vec<f64>], t: usize, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for r in rows {
        h[bin_of(r[t], lo, hi, bins)] += 1.0;
    }
    let n = rows.len() as f64;
    h.iter_mut().for_each(|c| *c /= n);
    h
}

/// Mean over time steps of `Σ_b |p_b − q_b| / bins`, with normalized
/// histograms on shared pooled edges.
pub fn marginal_distribution_difference(x: &[Vec<f64>], y: &[Vec<f64>], bins: usize) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Usage("MDD needs at least one curve per set".into()));
    }
    if bins == 0 {
        return Err(Error::Usage("bins must be ≥ 1".into()));
    }
    let len = check_rows(x, y)?;
    let mut total = 0.0;
    for t in 0..len {
        let Some((lo, hi)) = pooled_range(x, y, t) else {
            warn!("time step {t} has a degenerate pooled range; distance taken as 0");
            continue;
        };
        let (p, q) = (histogram(x, t, lo, hi, bins), histogram(y, t, lo, hi, bins));
        total += p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / bins as f64;
    }
    Ok(total / len as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub set_label: String,
    pub components: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub rows: Vec<PcaRow>,
    /// All eigenvalues of the pooled covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Share of total variance per retained component.
    pub explained_variance_ratio: Vec<f64>,
    pub mean: Vec<f64>,
    /// Retained unit loadings, one per component.
    pub loadings: Vec<Vec<f64>>,
}

/// PCA fitted on the pooled, mean-centered set (covariance with `N − 1`).
/// Each loading is sign-fixed so its largest-magnitude entry is positive.
pub fn pca_project(real: &[Vec<f64>], generated: &[Vec<f64>], dims: usize) -> Result<Pca> {
    let len = check_rows(real, generated)?;
    let pooled: Vec<&Vec<f64>> = real.iter().chain(generated).collect();
    let n = pooled.len();
    if dims == 0 || n < dims.max(2) || dims > len {
        return Err(Error::Usage(format!(
            "PCA with {dims} components needs at least that many rows and columns"
        )));
    }
    let mean: Vec<f64> = (0..len)
        .map(|t| pooled.iter().map(|r| r[t]).sum::<f64>() / n as f64)
        .collect();
    let centered = Mat::from_fn(n, len, |i, t| pooled[i][t] - mean[t]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let top = eigenvalues[0].max(0.0);
    let rank = eigenvalues.iter().filter(|&&e| e > top * 1e-10 && e > 0.0).count();
    if rank < dims {
        return Err(Error::Numerical {
            minor: rank,
            detail: format!("pooled data have rank {rank} < {dims} requested components"),
        });
    }
    let loadings: Vec<Vec<f64>> = order[..dims]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let pivot = v
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map_or(1.0, |(_, x)| x);
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let total: f64 = eigenvalues.iter().map(|e| e.max(0.0)).sum();
    let explained_variance_ratio = eigenvalues[..dims].iter().map(|e| e / total).collect();
    let rows = pooled
        .iter()
        .enumerate()
        .map(|(i, _)| PcaRow {
            set_label: if i < real.len() { "real" } else { "generated" }.to_string(),
            components: loadings
                .iter()
                .map(|l| (0..len).map(|t| centered[(i, t)] * l[t]).sum())
                .collect(),
        })
        .collect();
    Ok(Pca {
        rows,
        eigenvalues,
        explained_variance_ratio,
        mean,
        loadings,
    })
}

impl Pca {
    /// Columns `set_label,component_1,…`.
    pub fn write_csv_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let dims = self.loadings.len();
        let header: Vec<String> = (1..=dims).map(|d| format!("component_{d}")).collect();
        writeln!(w, "set_label,{}", header.join(","))?;
        for r in &self.rows {
            let vals: Vec<String> = r.components.iter().map(f64::to_string).collect();
            writeln!(w, "{},{}", r.set_label, vals.join(","))?;
        }
        w.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub timestep: usize,
    pub bin_center: f64,
    pub density: f64,
    pub set_label: String,
}

/// Per-timestep histogram densities (integrating to one) of both sets on
/// shared pooled edges. A degenerate step gets a unit-width bin around its
/// value.
pub fn density_table(real: &[Vec<f64>], generated: &[Vec<f64>], bins: usize) -> Result<Vec<DensityRow>> {
    if real.is_empty() || generated.is_empty() || bins == 0 {
        return Err(Error::Usage("density table needs data in both sets and bins ≥ 1".into()));
    }
    let len = check_rows(real, generated)?;
    let mut out = Vec::with_capacity(2 * len * bins);
    for t in 0..len {
        let (lo, hi) = pooled_range(real, generated, t).unwrap_or_else(|| {
            let v = real[0][t];
            (v - 0.5, v + 0.5)
        });
        let width = (hi - lo) / bins as f64;
        for (label, rows) in [("real", real), ("generated", generated)] {
            for (b, p) in histogram(rows, t, lo, hi, bins).into_iter().enumerate() {
                out.push(DensityRow {
                    timestep: t,
                    bin_center: lo + (b as f64 + 0.5) * width,
                    density: p / width,
                    set_label: label.to_string(),
                });
            }
        }
    }
    Ok(out)
}

pub fn write_density_csv(rows: &[DensityRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "timestep,bin_center,density,set_label")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.timestep, r.bin_center, r.density, r.set_label)?;
    }
    w.flush()
}

/// Mean, spread and range of one metric over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample sd; present only for more than one run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sd: Option<f64>,
    pub min: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_runs(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() > 1).then(|| {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // keep the mean inside the observed range despite round-off
        Self {
            mean: mean.clamp(min, max),
            sd,
            min,
            max,
            values,
        }
    }

    /// `"mean (sd)"` with four decimals, as in the experiment tables.
    pub fn cell(&self) -> String {
        match self.sd {
            Some(sd) => format!("{:.4} ({:.4})", self.mean, sd),
            None => format!("{:.4}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: ModelKind,
    pub mode: Mode,
    pub runs: usize,
    pub seed: u64,
    pub run_seeds: Vec<u64>,
    pub bin_count: usize,
    pub n_real: usize,
    pub n_generated: usize,
    pub mmd2: MetricSummary,
    pub mmd_bandwidth: MetricSummary,
    pub cd: MetricSummary,
    pub cd_skipped_pairs: usize,
    pub mdd: MetricSummary,
    /// How generation was conditioned.
    pub conditioning: String,
    /// Estimator readings, so numbers are only compared like with like.
    pub estimators: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn estimator_notes() -> BTreeMap<String, String> {
    [
        ("mmd", "unbiased MMD², Gaussian kernel, median-heuristic bandwidth, 1/(n·m) cross term"),
        ("cd", "sum of |Δ Pearson correlation| over all ordered timestep pairs"),
        ("mdd", "mean over timesteps of Σ|p−q|/bins on pooled equal-width edges"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Draws `n` curves "like the training data": physics-conditioned models use
/// resampled training conditions, unconditional models their latent prior.
pub fn sample_like_training(state: &ModelState, n: usize, seed: u64) -> Result<Generated> {
    if state.kind.is_conditional() {
        let conds = resample_conditions(state, n, seed)?;
        generate(state, &conds, 1, seed)
    } else {
        crate::models::generate::generate_unconditional(state, n, seed)
    }
}

/// Where physics-conditioned models take their conditions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Resampled training conditions.
    LikeTraining,
    /// One curve per real curve, at its own `(t0, ts)`.
    AtReal,
}

/// Draws one comparison set of `real.len()` curves.
pub fn sample_for(state: &ModelState, real: &SeriesBatch, how: Conditioning, seed: u64) -> Result<Generated> {
    match how {
        Conditioning::AtReal if state.kind.is_conditional() => generate(state, &real.conditions(), 1, seed),
        Conditioning::AtReal => {
            let mut g = crate::models::generate::generate_unconditional(state, real.len(), seed)?;
            g.warnings.push(UNCONDITIONAL_WARNING.to_string());
            Ok(g)
        }
        Conditioning::LikeTraining => sample_like_training(state, real.len(), seed),
    }
}

/// Generates `real.len()` curves per run and scores them against `real`.
pub fn evaluate(state: &ModelState, real: &SeriesBatch, runs: usize, seed: u64, bins: usize) -> Result<EvalReport> {
    evaluate_with(state, real, runs, seed, bins, Conditioning::LikeTraining)
}

/// [`evaluate`] with an explicit conditioning source.
pub fn evaluate_with(
    state: &ModelState,
    real: &SeriesBatch,
    runs: usize,
    seed: u64,
    bins: usize,
    how: Conditioning,
) -> Result<EvalReport> {
    if runs == 0 {
        return Err(Error::Usage("runs must be ≥ 1".into()));
    }
    state.require_trained()?;
    let run_seeds: Vec<u64> = (0..runs as u64).map(|r| rng::derive(seed, r)).collect();
    let (mut mmd, mut bw, mut cd, mut mdd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0;
    let mut warnings = Vec::new();
    for &s in &run_seeds {
        let g = sample_for(state, real, how, s)?;
        for w in g.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        let gen = g.batch.values();
        let m = mmd2_unbiased(real.values(), gen, None)?;
        let c = correlation_difference(real.values(), gen)?;
        mmd.push(m.mmd2);
        bw.push(m.bandwidth);
        cd.push(c.cd);
        skipped += c.skipped_pairs;
        mdd.push(marginal_distribution_difference(real.values(), gen, bins)?);
    }
    let values = [&mmd, &cd, &mdd];
    if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Domain("non-finite metric value".into()));
    }
    Ok(EvalReport {
        model_kind: state.kind,
        mode: state.mode,
        runs,
        seed,
        run_seeds,
        bin_count: bins,
        n_real: real.len(),
        n_generated: real.len(),
        mmd2: MetricSummary::from_runs(mmd),
        mmd_bandwidth: MetricSummary::from_runs(bw),
        cd: MetricSummary::from_runs(cd),
        cd_skipped_pairs: skipped,
        mdd: MetricSummary::from_runs(mdd),
        conditioning: match (state.kind.is_conditional(), how) {
            (false, _) => "unconditional latent prior".into(),
            (true, Conditioning::LikeTraining) => "resampled training conditions (jitter sd 0.25 °C)".into(),
            (true, Conditioning::AtReal) => "conditions of the real curves".into(),
        },
        estimators: estimator_notes(),
        warnings,
    })
}
