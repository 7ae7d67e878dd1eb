//! Table reproduction: for each (mode, model) cell, train over several
//! seeds, generate, score, and export figure data.
//!
//! `in_dist` trains on a random share of each mode and scores against the
//! full set with conditions resampled from training. `out_dist` trains on
//! every curve starting at or above the cutoff, scores against the curves
//! below it (physics models generate at their conditions), and probes
//! generation at one fixed condition below the cutoff.

use std::path::PathBuf;

use log::{error, info};
use pigpvae::data::{split, write_csv_to, Mode, SeriesBatch, SplitSpec};
use pigpvae::metrics::{estimator_notes, evaluate_with, sample_for, Conditioning, EvalReport, MetricSummary};
use pigpvae::models::{generate, generate_unconditional, ModelKind, ModelState};
use pigpvae::physics::Condition;
use pigpvae::rng;
use pigpvae::training::train;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::config::{Case, RunConfig};
use crate::error::{CliError, Result};
use crate::figures::write_figures;
use crate::output::{ManifestEntry, OutputDir};

/// Salt deriving the probe's generation seed from a cell seed.
const PROBE_SALT: u64 = 0x0d15;

/// Fewest real curves the metrics accept (correlations need three).
const MIN_REAL: usize = 3;

/// Generation at one fixed condition below the cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub requested: Condition,
    pub n: usize,
    /// False for models without a physical decoder; their curves come from
    /// the latent prior instead.
    pub conditioned: bool,
    /// Largest |first value − requested t0|, °C.
    pub max_start_error: f64,
    /// Share of curves whose last value lies strictly between t0 and ts.
    pub final_between_share: f64,
    /// Share of curves whose first value lies below the cutoff.
    pub share_below_cutoff: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub n_train: usize,
    pub n_real: usize,
    /// Missing when too few real curves were available to score.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub case: Case,
    pub mode: Mode,
    pub model_kind: ModelKind,
    pub can_condition: bool,
    pub seeds: Vec<SeedResult>,
    /// Over seeds, each seed contributing its mean over evaluation runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mmd2: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cd: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mdd: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub probe: Option<ProbeReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub mode: Mode,
    pub model: String,
    #[serde(rename = "MMD")]
    pub mmd: String,
    #[serde(rename = "CD")]
    pub cd: String,
    #[serde(rename = "MDD")]
    pub mdd: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub case: Case,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cutoff: Option<f64>,
    pub rows: Vec<TableRow>,
    /// Models that cannot generate at requested conditions.
    pub cannot_condition: Vec<String>,
    /// Full per-cell reports, keyed `<mode>_<kind>`.
    pub cells: BTreeMap<String, CellReport>,
    pub estimators: BTreeMap<String, String>,
    pub aggregation: String,
}

impl ExperimentTable {
    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let path = dir.join("table.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad table: {e}")))
    }

    pub fn row(&self, mode: Mode, kind: ModelKind) -> Option<&CellReport> {
        self.cells.get(&cell_key(mode, kind))
    }
}

fn cell_key(mode: Mode, kind: ModelKind) -> String {
    format!("{mode}_{kind}")
}

fn split_for(cfg: &RunConfig, seed: u64) -> SplitSpec {
    let x = &cfg.experiment;
    match x.case {
        Case::InDist => SplitSpec {
            train_fraction: x.train_fraction,
            seed,
            ood_cutoff: None,
        },
        Case::OutDist => SplitSpec {
            train_fraction: 1.0,
            seed,
            ood_cutoff: Some(x.cutoff),
        },
    }
}

/// Curves scored against: all of them in-distribution, those starting below
/// the cutoff out of distribution.
fn real_set(cfg: &RunConfig, data: &SeriesBatch) -> Result<SeriesBatch> {
    match cfg.experiment.case {
        Case::InDist => Ok(data.clone()),
        Case::OutDist => {
            let below: Vec<usize> = (0..data.len()).filter(|&i| data.t0(i) < cfg.experiment.cutoff).collect();
            Ok(data.subset(&below)?)
        }
    }
}

fn probe_condition(cfg: &RunConfig, train_b: &SeriesBatch) -> Condition {
    let p = cfg.experiment.ood_condition;
    let gap = train_b.ts().iter().zip(train_b.t0s()).map(|(s, t)| s - t).sum::<f64>() / train_b.len() as f64;
    Condition {
        t0: p.t0,
        ts: p.ts.unwrap_or(p.t0 + gap),
    }
}

fn run_probe(
    cfg: &RunConfig,
    state: &ModelState,
    train_b: &SeriesBatch,
    seed: u64,
) -> Result<(ProbeReport, SeriesBatch)> {
    let cond = probe_condition(cfg, train_b);
    let n = cfg.experiment.ood_samples;
    let conditioned = state.kind.is_conditional();
    let g = if conditioned {
        generate(state, &[cond], n, seed)?
    } else {
        let mut g = generate_unconditional(state, n, seed)?;
        g.warnings.push(pigpvae::models::generate::UNCONDITIONAL_WARNING.to_string());
        g
    };
    let rows = g.batch.values();
    let (lo, hi) = (cond.t0.min(cond.ts), cond.t0.max(cond.ts));
    let share = |f: &dyn Fn(&Vec<f64>) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / rows.len() as f64;
    let report = ProbeReport {
        requested: cond,
        n: rows.len(),
        conditioned,
        max_start_error: rows.iter().map(|r| (r[0] - cond.t0).abs()).fold(0.0, f64::max),
        final_between_share: share(&|r| {
            let last = r[r.len() - 1];
            last > lo && last < hi
        }),
        share_below_cutoff: share(&|r| r[0] < cfg.experiment.cutoff),
        warnings: g.warnings,
    };
    Ok((report, g.batch))
}

fn summarize(seeds: &[SeedResult], pick: impl Fn(&EvalReport) -> f64) -> Option<MetricSummary> {
    let v: Vec<f64> = seeds.iter().filter_map(|s| s.report.as_ref().map(&pick)).collect();
    (!v.is_empty()).then(|| MetricSummary::from_runs(v))
}

/// One (mode, model) cell over all seeds. Files go under
/// `cells/<mode>_<kind>/`; the cell report is written last.
fn run_cell(
    cfg: &RunConfig,
    out: &OutputDir,
    data: &SeriesBatch,
    kind: ModelKind,
) -> Result<(CellReport, Vec<ManifestEntry>)> {
    let x = &cfg.experiment;
    let mode = data.mode();
    let dir = format!("cells/{}/", cell_key(mode, kind));
    let how = match x.case {
        Case::InDist => Conditioning::LikeTraining,
        Case::OutDist => Conditioning::AtReal,
    };
    let real = real_set(cfg, data)?;
    let mut files = Vec::new();
    let mut warnings = Vec::new();
    let mut seeds = Vec::new();
    let mut probe = None;
    if real.len() < MIN_REAL {
        warnings.push(format!("{} real curves to score against; metrics skipped", real.len()));
    }
    for i in 0..x.seeds as u64 {
        let seed = cfg.seed + i;
        let (train_b, _) = split(data, &split_for(cfg, seed))?;
        info!("{mode} {kind} seed {seed}: training on {} curves", train_b.len());
        let trace = train(&cfg.model.for_kind(kind), &train_b, &cfg.train.config(seed))?;
        let state = trace.state;
        files.push(out.write(&format!("{dir}checkpoint_seed{seed}.json"), state.to_json()?.as_bytes())?);
        let report = if real.len() >= MIN_REAL {
            Some(evaluate_with(&state, &real, cfg.eval.runs, seed, cfg.eval.bins, how)?)
        } else {
            None
        };
        if i == 0 {
            if let Some(r) = &report {
                let generated = sample_for(&state, &real, how, r.run_seeds[0])?.batch;
                files.extend(write_figures(
                    out,
                    &dir,
                    &state,
                    &real,
                    &generated,
                    &train_b,
                    cfg.eval.bins,
                    cfg.eval.pca_dims,
                    &mut warnings,
                )?);
            }
            if x.case == Case::OutDist {
                let (p, batch) = run_probe(cfg, &state, &train_b, rng::derive(seed, PROBE_SALT))?;
                files.push(out.write_with(&format!("{dir}ood_generated.csv"), |w| {
                    write_csv_to(w, &[&batch]).map_err(std::io::Error::other)
                })?);
                probe = Some(p);
            }
        }
        for w in report.iter().flat_map(|r| &r.warnings) {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        seeds.push(SeedResult {
            seed,
            n_train: train_b.len(),
            n_real: real.len(),
            report,
        });
    }
    let cell = CellReport {
        case: x.case,
        mode,
        model_kind: kind,
        can_condition: kind.is_conditional(),
        mmd2: summarize(&seeds, |r| r.mmd2.mean),
        cd: summarize(&seeds, |r| r.cd.mean),
        mdd: summarize(&seeds, |r| r.mdd.mean),
        seeds,
        probe,
        warnings,
    };
    files.push(out.write_json(&format!("{dir}report.json"), &cell)?);
    Ok((cell, files))
}

fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("mode,model,MMD,CD,MDD\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.mode, r.model, r.mmd, r.cd, r.mdd));
    }
    s
}

/// Runs every cell with at most `workers` in parallel, then writes
/// `table.json`, `table.csv` and the manifest. Cells that fail are reported
/// in the table and make the command fail after everything else is written.
pub fn cmd_experiment(cfg: &RunConfig, workers: usize) -> Result<PathBuf> {
    let x = &cfg.experiment;
    let all = cfg.data.batches()?;
    let mut data = Vec::new();
    for &mode in &x.modes {
        let b = all
            .iter()
            .find(|b| b.mode() == mode)
            .ok_or_else(|| CliError::Config(format!("the data contain no {mode} curves")))?;
        // the candidate set does not depend on the seed: fail before training
        split(b, &split_for(cfg, cfg.seed))?;
        data.push(b.clone());
    }
    let out = OutputDir::create(&cfg.output_dir)?;
    let mut files = vec![out.write("experiment.config.json", cfg.to_json().as_bytes())?];

    let cells: Vec<(&SeriesBatch, ModelKind)> =
        data.iter().flat_map(|b| x.kinds.iter().map(move |&k| (b, k))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<(CellReport, Vec<ManifestEntry>)>> =
        pool.install(|| cells.par_iter().map(|&(b, k)| run_cell(cfg, &out, b, k)).collect());

    let mut rows = Vec::new();
    let mut reports = BTreeMap::new();
    let mut failed = 0;
    for (&(b, kind), res) in cells.iter().zip(results) {
        let name = kind.display_name().to_string();
        match res {
            Ok((cell, f)) => {
                let show = |m: &Option<MetricSummary>| m.as_ref().map_or("n/a".to_string(), MetricSummary::cell);
                rows.push(TableRow {
                    mode: b.mode(),
                    model: name,
                    mmd: show(&cell.mmd2),
                    cd: show(&cell.cd),
                    mdd: show(&cell.mdd),
                    error: None,
                });
                files.extend(f);
                reports.insert(cell_key(b.mode(), kind), cell);
            }
            Err(e) => {
                error!("{} {kind}: {}", b.mode(), e.line());
                failed += 1;
                rows.push(TableRow {
                    mode: b.mode(),
                    model: name,
                    mmd: "error".into(),
                    cd: "error".into(),
                    mdd: "error".into(),
                    error: Some(e.line()),
                });
            }
        }
    }
    let table = ExperimentTable {
        case: x.case,
        seeds: (0..x.seeds as u64).map(|i| cfg.seed + i).collect(),
        cutoff: (x.case == Case::OutDist).then_some(x.cutoff),
        rows,
        cannot_condition: x
            .kinds
            .iter()
            .filter(|k| !k.is_conditional())
            .map(|k| k.display_name().to_string())
            .collect(),
        cells: reports,
        estimators: estimator_notes(),
        aggregation: format!(
            "mean (sd) over {} seeds of each seed's mean over {} evaluation runs",
            x.seeds, cfg.eval.runs
        ),
    };
    files.push(out.write_json("table.json", &table)?);
    files.push(out.write("table.csv", table_csv(&table.rows).as_bytes())?);
    let manifest = out.finish("experiment", files)?;
    if failed > 0 {
        return Err(CliError::Cells {
            failed,
            total: cells.len(),
        });
    }
    Ok(manifest)
}
