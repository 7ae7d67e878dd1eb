//! The JSON run configuration. Every section is optional and every key
//! defaults; unknown keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use pigpvae::data::{load_csv, synthesize_surrogate, Mode, NoiseConfig, SeriesBatch, SurrogateConfig};
use pigpvae::gp::KernelParams;
use pigpvae::models::{AlphaConfig, ModelConfig, ModelKind};
use pigpvae::nets::Activation;
use pigpvae::physics::{Condition, PhysicalPrior};
use pigpvae::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
    /// Seeds splits, initialization, training noise and generation.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            generate: GenerateSection::default(),
            eval: EvalSection::default(),
            experiment: ExperimentSection::default(),
            seed: 0,
            output_dir: PathBuf::from("output"),
        }
    }
}

/// Curves come from a CSV file or from the surrogate generator, never both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateSection>,
    /// Mode used by `train`, `generate` and `evaluate`.
    #[serde(default = "DataSection::default_mode")]
    pub mode: Mode,
    #[serde(default = "DataSection::default_fraction")]
    pub train_fraction: f64,
    /// Train only on curves starting at or above this temperature.
    #[serde(default)]
    pub cutoff: Option<f64>,
}

impl DataSection {
    fn default_mode() -> Mode {
        Mode::Heating
    }

    fn default_fraction() -> f64 {
        0.7
    }

    /// Loads (or synthesizes) every non-empty mode.
    pub fn batches(&self) -> Result<Vec<SeriesBatch>> {
        match (&self.path, &self.surrogate) {
            (Some(p), None) => Ok(load_csv(p)?),
            (None, Some(s)) => s.batches(),
            _ => Err(CliError::Config("data needs exactly one of `path` and `surrogate`".into())),
        }
    }

    pub fn batch(&self, mode: Mode) -> Result<SeriesBatch> {
        self.batches()?
            .into_iter()
            .find(|b| b.mode() == mode)
            .ok_or_else(|| CliError::Config(format!("the data contain no {mode} curves")))
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            surrogate: None,
            mode: Self::default_mode(),
            train_fraction: Self::default_fraction(),
            cutoff: None,
        }
    }
}

/// Surrogate settings for both modes; a count of zero skips that mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub heating_n: usize,
    pub cooling_n: usize,
    pub len: usize,
    pub k_mean: f64,
    pub k_sd: f64,
    pub heating_t0_range: (f64, f64),
    pub cooling_t0_range: (f64, f64),
    pub gap_range: (f64, f64),
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        let heat = SurrogateConfig::for_mode(Mode::Heating, 29, 42);
        let cool = SurrogateConfig::for_mode(Mode::Cooling, 28, 42);
        Self {
            heating_n: heat.n,
            cooling_n: cool.n,
            len: heat.len,
            k_mean: heat.k_mean,
            k_sd: heat.k_sd,
            heating_t0_range: heat.t0_range,
            cooling_t0_range: cool.t0_range,
            gap_range: heat.gap_range,
            noise: heat.noise,
            seed: heat.seed,
        }
    }
}

impl SurrogateSection {
    pub fn for_mode(&self, mode: Mode) -> SurrogateConfig {
        let (n, t0_range) = match mode {
            Mode::Heating => (self.heating_n, self.heating_t0_range),
            Mode::Cooling => (self.cooling_n, self.cooling_t0_range),
        };
        SurrogateConfig {
            n,
            len: self.len,
            mode,
            k_mean: self.k_mean,
            k_sd: self.k_sd,
            t0_range,
            gap_range: self.gap_range,
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn batches(&self) -> Result<Vec<SeriesBatch>> {
        let mut out = Vec::new();
        for mode in [Mode::Heating, Mode::Cooling] {
            let cfg = self.for_mode(mode);
            if cfg.n > 0 {
                out.push(synthesize_surrogate(&cfg)?);
            }
        }
        if out.is_empty() {
            return Err(CliError::Config("surrogate asks for zero curves".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSection {
    #[serde(default)]
    pub prior: PhysicalPrior,
}

/// Architecture settings. `latent_dims` left unset takes the kind's default
/// (2 for vae/gpvae, 0 for pivae, 1 for pigpvae).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dims: Option<usize>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub kernel: KernelParams,
    pub train_kernel: bool,
    pub per_channel_kernels: bool,
    pub physics: PhysicsSection,
    pub alpha: AlphaConfig,
    pub obs_sd: f64,
    pub samples: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            kind: m.kind,
            latent_dims: None,
            encoder_hidden: m.encoder_hidden,
            decoder_hidden: m.decoder_hidden,
            activation: m.activation,
            kernel: m.kernel,
            train_kernel: m.train_kernel,
            per_channel_kernels: m.per_channel_kernels,
            physics: PhysicsSection { prior: m.prior },
            alpha: m.alpha,
            obs_sd: m.obs_sd,
            samples: m.samples,
        }
    }
}

impl ModelSection {
    /// The model config for `kind`, sharing every other setting.
    pub fn for_kind(&self, kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            latent_dims: self.latent_dims.unwrap_or(ModelConfig::for_kind(kind).latent_dims),
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            activation: self.activation,
            kernel: self.kernel,
            train_kernel: self.train_kernel,
            per_channel_kernels: self.per_channel_kernels,
            prior: self.physics.prior,
            alpha: self.alpha,
            obs_sd: self.obs_sd,
            samples: self.samples,
        }
    }

    pub fn config(&self) -> ModelConfig {
        self.for_kind(self.kind)
    }
}

/// Optimizer settings; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            clip: t.clip,
            log_every: t.log_every,
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed,
            clip: self.clip,
            log_every: self.log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    /// Defaults to `checkpoint.json` in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Explicit conditions; when empty, `n` curves are drawn like the
    /// training data.
    pub conditions: Vec<Condition>,
    pub n_per_condition: usize,
    pub n: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            conditions: Vec::new(),
            n_per_condition: 10,
            n: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub runs: usize,
    pub bins: usize,
    pub pca_dims: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            runs: 5,
            bins: pigpvae::metrics::DEFAULT_BINS,
            pca_dims: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    #[value(name = "in_dist")]
    InDist,
    #[value(name = "out_dist")]
    OutDist,
}

impl Case {
    pub fn as_str(self) -> &'static str {
        match self {
            Case::InDist => "in_dist",
            Case::OutDist => "out_dist",
        }
    }
}

/// A fixed condition for the out-of-distribution probe; `ts` defaults to
/// `t0` plus the mean training gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeCondition {
    pub t0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub case: Case,
    /// Start-temperature cutoff for `out_dist`, °C.
    pub cutoff: f64,
    pub seeds: usize,
    /// Share of curves trained on in `in_dist`; `out_dist` trains on every
    /// curve above the cutoff.
    pub train_fraction: f64,
    pub kinds: Vec<ModelKind>,
    pub modes: Vec<Mode>,
    pub ood_condition: ProbeCondition,
    pub ood_samples: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            case: Case::InDist,
            cutoff: 20.0,
            seeds: 5,
            train_fraction: 0.7,
            kinds: vec![ModelKind::Gpvae, ModelKind::Pivae, ModelKind::Pigpvae],
            modes: vec![Mode::Heating, Mode::Cooling],
            ood_condition: ProbeCondition { t0: 17.0, ts: None },
            ood_samples: 200,
        }
    }
}

/// Command-line overrides, applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub case: Option<Case>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Reads `path` (or takes the defaults), applies overrides and validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        if let Some(dir) = &overrides.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(case) = overrides.case {
            cfg.experiment.case = case;
        }
        if cfg.data.path.is_none() && cfg.data.surrogate.is_none() {
            cfg.data.surrogate = Some(SurrogateSection::default());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.data;
        if d.path.is_some() == d.surrogate.is_some() {
            return bad("data needs exactly one of `path` and `surrogate`".into());
        }
        if !(d.train_fraction > 0.0 && d.train_fraction <= 1.0) {
            return bad(format!("data.train_fraction {} outside (0, 1]", d.train_fraction));
        }
        if let Some(s) = &d.surrogate {
            for mode in [Mode::Heating, Mode::Cooling] {
                let c = s.for_mode(mode);
                let (lo, hi) = c.t0_range;
                let (glo, ghi) = c.gap_range;
                if !(lo <= hi && glo <= ghi && glo >= 0.0) {
                    return bad(format!("surrogate {mode} ranges must be ordered and gaps non-negative"));
                }
            }
            if s.len < 2 || !(s.k_mean > 0.0) || !(s.k_sd >= 0.0) {
                return bad("surrogate needs len ≥ 2, k_mean > 0 and k_sd ≥ 0".into());
            }
        }
        for kind in [ModelKind::Vae, ModelKind::Gpvae, ModelKind::Pivae, ModelKind::Pigpvae] {
            self.model.for_kind(kind).validate()?;
        }
        self.train.config(self.seed).validate()?;
        if self.generate.n == 0 || self.generate.n_per_condition == 0 {
            return bad("generate.n and generate.n_per_condition must be ≥ 1".into());
        }
        let e = &self.eval;
        if e.runs == 0 || e.bins == 0 || e.pca_dims == 0 {
            return bad("eval.runs, eval.bins and eval.pca_dims must be ≥ 1".into());
        }
        let x = &self.experiment;
        if x.seeds == 0 || x.ood_samples == 0 {
            return bad("experiment.seeds and experiment.ood_samples must be ≥ 1".into());
        }
        if !(x.train_fraction > 0.0 && x.train_fraction <= 1.0) {
            return bad(format!("experiment.train_fraction {} outside (0, 1]", x.train_fraction));
        }
        if x.kinds.is_empty() || x.modes.is_empty() {
            return bad("experiment.kinds and experiment.modes must be non-empty".into());
        }
        if x.kinds.contains(&ModelKind::Vae) {
            return bad("experiment tables compare gpvae, pivae and pigpvae; vae is not allowed".into());
        }
        let unique = |n: usize, v: Vec<String>| {
            let mut s = v;
            s.sort();
            s.dedup();
            s.len() == n
        };
        if !unique(x.kinds.len(), x.kinds.iter().map(|k| k.to_string()).collect())
            || !unique(x.modes.len(), x.modes.iter().map(|m| m.to_string()).collect())
        {
            return bad("experiment.kinds and experiment.modes must not repeat".into());
        }
        if !x.cutoff.is_finite() || !x.ood_condition.t0.is_finite() {
            return bad("experiment cutoff and probe t0 must be finite".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn generate_checkpoint(&self) -> PathBuf {
        self.generate.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("checkpoint.json"))
    }

    pub fn eval_checkpoint(&self) -> PathBuf {
        self.eval.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("checkpoint.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let resolved = RunConfig::resolve(None, &Overrides::default()).unwrap();
        assert_eq!(resolved.data.surrogate, Some(SurrogateSection::default()));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"model": {"kernel": {"length": 0.2}}}"#,
            r#"{"model": {"physics": {"prior": {"mean": 1.0, "sd": 0.5, "x": 0}}}}"#,
            r#"{"data": {"surrogate": {"noise": {"amp": 0.1}}}}"#,
        ] {
            let err = RunConfig::from_json(doc).unwrap_err();
            assert_eq!(err.category(), "config", "{doc}");
            assert!(err.to_string().contains("unknown field"), "{err}");
        }
    }

    #[test]
    fn resolved_copy_round_trips() {
        let mut cfg = RunConfig::resolve(None, &Overrides { seed: Some(7), ..Overrides::default() }).unwrap();
        cfg.model.latent_dims = Some(3);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn invalid_settings_fail_validation() {
        let cases = [
            r#"{"data": {"path": "x.csv", "surrogate": {}}}"#,
            r#"{"train": {"epochs": 0}}"#,
            r#"{"experiment": {"kinds": ["vae", "pivae"]}}"#,
            r#"{"experiment": {"kinds": ["pivae", "pivae"]}}"#,
            r#"{"eval": {"runs": 0}}"#,
            r#"{"model": {"physics": {"prior": {"mean": 0.0, "sd": -1.0}}}}"#,
        ];
        for doc in cases {
            let cfg = RunConfig::from_json(doc).unwrap();
            let mut c = cfg.clone();
            if c.data.path.is_none() && c.data.surrogate.is_none() {
                c.data.surrogate = Some(SurrogateSection::default());
            }
            assert!(c.validate().is_err(), "{doc}");
        }
    }

    #[test]
    fn latent_dims_follow_the_kind_unless_set() {
        let mut m = ModelSection::default();
        assert_eq!(m.for_kind(ModelKind::Gpvae).latent_dims, 2);
        assert_eq!(m.for_kind(ModelKind::Pivae).latent_dims, 0);
        m.latent_dims = Some(4);
        assert_eq!(m.for_kind(ModelKind::Pigpvae).latent_dims, 4);
    }
}
