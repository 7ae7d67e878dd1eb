//! The single-step subcommands. Each writes a resolved copy of its config
//! and a manifest of everything it wrote.

use std::path::PathBuf;

use log::{info, warn};
use pigpvae::data::{split, write_csv_to, Mode, SeriesBatch, SplitSpec};
use pigpvae::metrics::{evaluate, sample_like_training};
use pigpvae::models::{generate, reconstruct, LossBreakdown, ModelKind, ModelState};
use pigpvae::physics::Condition;
use pigpvae::training::train;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::figures::write_figures;
use crate::output::{ManifestEntry, OutputDir};

fn start(cfg: &RunConfig, command: &str) -> Result<(OutputDir, Vec<ManifestEntry>)> {
    let out = OutputDir::create(&cfg.output_dir)?;
    let entry = out.write(&format!("{command}.config.json"), cfg.to_json().as_bytes())?;
    Ok((out, vec![entry]))
}

fn batch_csv<'a>(batches: &'a [&'a SeriesBatch]) -> impl FnOnce(&mut Vec<u8>) -> std::io::Result<()> + 'a {
    move |w| write_csv_to(w, batches).map_err(std::io::Error::other)
}

/// Writes the configured dataset (surrogate or file) as `dataset.csv`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let batches = cfg.data.batches()?;
    let (out, mut files) = start(cfg, "synth")?;
    let refs: Vec<&SeriesBatch> = batches.iter().collect();
    files.push(out.write_with("dataset.csv", batch_csv(&refs))?);
    for b in &batches {
        info!("{} {} curves of length {}", b.len(), b.mode(), b.series_len());
    }
    out.finish("synth", files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_kind: ModelKind,
    pub mode: Mode,
    pub n_train: usize,
    pub train_ids: Vec<String>,
    pub epochs: usize,
    pub final_loss: LossBreakdown,
    pub clip_events_last_100: usize,
    /// Mean posterior-mean rate over the training curves (physics models).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_rate: Option<f64>,
}

/// Splits, trains and writes `checkpoint.json`, `trace.csv`,
/// `train_set.csv` and `train_summary.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let data = cfg.data.batch(cfg.data.mode)?;
    let spec = SplitSpec {
        train_fraction: cfg.data.train_fraction,
        seed: cfg.seed,
        ood_cutoff: cfg.data.cutoff,
    };
    let (train_b, _) = split(&data, &spec)?;
    let (out, mut files) = start(cfg, "train")?;
    let model = cfg.model.config();
    info!("training {} on {} {} curves", model.kind, train_b.len(), train_b.mode());
    let trace = train(&model, &train_b, &cfg.train.config(cfg.seed))?;
    let rates = reconstruct(&trace.state, &train_b)?.rates;
    let summary = TrainSummary {
        model_kind: model.kind,
        mode: train_b.mode(),
        n_train: train_b.len(),
        train_ids: train_b.ids().to_vec(),
        epochs: trace.history.len(),
        final_loss: trace.history.last().cloned().expect("at least one epoch"),
        clip_events_last_100: trace.clip_events_in_last(100),
        mean_rate: rates.map(|r| r.iter().sum::<f64>() / r.len() as f64),
    };
    files.push(out.write("checkpoint.json", trace.state.to_json()?.as_bytes())?);
    files.push(out.write_with("trace.csv", |w| trace.write_csv_to(w))?);
    files.push(out.write_with("train_set.csv", batch_csv(&[&train_b]))?);
    files.push(out.write_json("train_summary.json", &summary)?);
    out.finish("train", files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub model_kind: ModelKind,
    pub mode: Mode,
    pub seed: u64,
    pub n_generated: usize,
    /// Requested conditions; empty when drawn like the training data.
    pub conditions: Vec<Condition>,
    pub n_per_condition: usize,
    pub warnings: Vec<String>,
}

/// Samples from a checkpoint into `generated.csv` and
/// `generate_report.json`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf> {
    let state = ModelState::load(cfg.generate_checkpoint())?;
    let g = &cfg.generate;
    let generated = if g.conditions.is_empty() {
        sample_like_training(&state, g.n, cfg.seed)?
    } else {
        generate(&state, &g.conditions, g.n_per_condition, cfg.seed)?
    };
    for w in &generated.warnings {
        warn!("{w}");
    }
    let (out, mut files) = start(cfg, "generate")?;
    files.push(out.write_with("generated.csv", batch_csv(&[&generated.batch]))?);
    let report = GenerateReport {
        model_kind: state.kind,
        mode: state.mode,
        seed: cfg.seed,
        n_generated: generated.batch.len(),
        conditions: g.conditions.clone(),
        n_per_condition: if g.conditions.is_empty() { 1 } else { g.n_per_condition },
        warnings: generated.warnings,
    };
    files.push(out.write_json("generate_report.json", &report)?);
    out.finish("generate", files)
}

/// Scores a checkpoint against the data of its mode: `report.json` plus
/// figure tables for the first run's generated set.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    let state = ModelState::load(cfg.eval_checkpoint())?;
    let real = cfg.data.batch(state.mode)?;
    let e = &cfg.eval;
    let mut report = evaluate(&state, &real, e.runs, cfg.seed, e.bins)?;
    let generated = sample_like_training(&state, real.len(), report.run_seeds[0])?.batch;
    let (out, mut files) = start(cfg, "evaluate")?;
    let mut warnings = Vec::new();
    files.extend(write_figures(&out, "", &state, &real, &generated, &real, e.bins, e.pca_dims, &mut warnings)?);
    report.warnings.extend(warnings);
    files.push(out.write_json("report.json", &report)?);
    out.finish("evaluate", files)
}
