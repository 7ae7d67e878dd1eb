//! Plain-CSV figure data: curves, PCA projections, per-timestep densities
//! and the physics/discrepancy split of reconstructions.

use std::io::{self, Write};

use log::warn;
use pigpvae::data::SeriesBatch;
use pigpvae::metrics::{density_table, pca_project, write_density_csv};
use pigpvae::models::{reconstruct, ModelState};
use serde::Serialize;

use crate::error::Result;
use crate::output::{ManifestEntry, OutputDir};

/// Long format: `set_label,id,step,time,value`.
pub fn write_curves(real: &SeriesBatch, generated: &SeriesBatch, mut w: impl Write) -> io::Result<()> {
    writeln!(w, "set_label,id,step,time,value")?;
    for (label, b) in [("real", real), ("generated", generated)] {
        let grid = b.time_grid();
        for (id, row) in b.ids().iter().zip(b.values()) {
            for (step, (t, v)) in grid.iter().zip(row).enumerate() {
                writeln!(w, "{label},{id},{step},{t},{v}")?;
            }
        }
    }
    Ok(())
}

/// `id,step,time,observed,x_hat,x_phy,delta`, all in °C; `delta` is the
/// discrepancy branch's share of the reconstruction.
pub fn write_decomposition(
    batch: &SeriesBatch,
    x_hat: &[Vec<f64>],
    x_phy: &[Vec<f64>],
    mut w: impl Write,
) -> io::Result<()> {
    writeln!(w, "id,step,time,observed,x_hat,x_phy,delta")?;
    let grid = batch.time_grid();
    for (i, id) in batch.ids().iter().enumerate() {
        for (step, t) in grid.iter().enumerate() {
            let (obs, fit, phy) = (batch.values()[i][step], x_hat[i][step], x_phy[i][step]);
            writeln!(w, "{id},{step},{t},{obs},{fit},{phy},{}", fit - phy)?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PcaSummary<'a> {
    eigenvalues: &'a [f64],
    explained_variance_ratio: &'a [f64],
    mean: &'a [f64],
    loadings: &'a [Vec<f64>],
}

/// Writes every figure table under `prefix` and returns the entries. A PCA
/// that cannot be fitted (too few rows, or rank-deficient data) is skipped
/// with a warning appended to `warnings`.
#[allow(clippy::too_many_arguments)]
pub fn write_figures(
    out: &OutputDir,
    prefix: &str,
    state: &ModelState,
    real: &SeriesBatch,
    generated: &SeriesBatch,
    reconstructed: &SeriesBatch,
    bins: usize,
    pca_dims: usize,
    warnings: &mut Vec<String>,
) -> Result<Vec<ManifestEntry>> {
    let mut files = vec![out.write_with(&format!("{prefix}curves.csv"), |w| write_curves(real, generated, w))?];
    match pca_project(real.values(), generated.values(), pca_dims) {
        Ok(pca) => {
            files.push(out.write_with(&format!("{prefix}pca.csv"), |w| pca.write_csv_to(w))?);
            let summary = PcaSummary {
                eigenvalues: &pca.eigenvalues,
                explained_variance_ratio: &pca.explained_variance_ratio,
                mean: &pca.mean,
                loadings: &pca.loadings,
            };
            files.push(out.write_json(&format!("{prefix}pca_summary.json"), &summary)?);
        }
        Err(e) => {
            warn!("PCA skipped: {e}");
            warnings.push(format!("PCA skipped: {e}"));
        }
    }
    let dens = density_table(real.values(), generated.values(), bins)?;
    files.push(out.write_with(&format!("{prefix}densities.csv"), |w| write_density_csv(&dens, w))?);
    if state.kind.is_conditional() {
        let rec = reconstruct(state, reconstructed)?;
        let phy = rec.x_phy.as_ref().expect("physics models report x_phy");
        files.push(out.write_with(&format!("{prefix}decomposition.csv"), |w| {
            write_decomposition(reconstructed, &rec.x_hat, phy, w)
        })?);
    }
    Ok(files)
}
