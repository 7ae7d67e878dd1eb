//! JSON checkpoints. Floats are written with round-trip precision, so a
//! saved state loads back bit-identically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::state::{Alpha, KernelRaw, ModelKind, ModelState};
use crate::data::{Mode, Normalizer};
use crate::error::{Error, Result};
use crate::nets::{Activation, Mat, Mlp};
use crate::physics::{Condition, PhysicalPrior};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetRecord {
    widths: Vec<usize>,
    hidden: Activation,
    output: Option<Activation>,
    /// Per layer, `fan_in × fan_out` weights in row-major order.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl NetRecord {
    fn from_mlp(net: &Mlp) -> Self {
        Self {
            widths: net.widths().to_vec(),
            hidden: net.hidden_activation(),
            output: net.output_activation(),
            weights: net.weights().iter().map(super::state::row_major).collect(),
            biases: net.biases().iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }

    fn into_mlp(self) -> Result<Mlp> {
        if self.widths.len() < 2 || self.weights.len() + 1 != self.widths.len() {
            return Err(Error::Format("network record has inconsistent layers".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, pair) in self.widths.windows(2).enumerate() {
            let (r, c) = (pair[0], pair[1]);
            if self.weights[i].len() != r * c || self.biases.get(i).map(Vec::len) != Some(c) {
                return Err(Error::Format(format!("layer {i} has the wrong parameter count")));
            }
            weights.push(Mat::from_row_slice(r, c, &self.weights[i]));
            biases.push(Mat::from_row_slice(1, c, &self.biases[i]));
        }
        Mlp::from_parts(self.widths, weights, biases, self.hidden, self.output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    model_kind: ModelKind,
    mode: Mode,
    series_len: usize,
    latent_dims: usize,
    encoder: Option<NetRecord>,
    phys_encoder: Option<NetRecord>,
    decoder: Option<NetRecord>,
    delta_decoder: Option<NetRecord>,
    kernels: Vec<KernelRaw>,
    jitter: f64,
    train_kernel: bool,
    prior: PhysicalPrior,
    alpha: Alpha,
    obs_sd_raw: f64,
    samples: usize,
    normalizer: Normalizer,
    conditions: Vec<Condition>,
    seed: u64,
    trained: bool,
}

impl ModelState {
    pub fn to_json(&self) -> Result<String> {
        let net = |n: &Option<Mlp>| n.as_ref().map(NetRecord::from_mlp);
        let ck = Checkpoint {
            format_version: FORMAT_VERSION,
            model_kind: self.kind,
            mode: self.mode,
            series_len: self.series_len,
            latent_dims: self.latent_dims,
            encoder: net(&self.encoder),
            phys_encoder: net(&self.phys_encoder),
            decoder: net(&self.decoder),
            delta_decoder: net(&self.delta_decoder),
            kernels: self.kernels.clone(),
            jitter: self.jitter,
            train_kernel: self.train_kernel,
            prior: self.prior,
            alpha: self.alpha,
            obs_sd_raw: self.obs_sd_raw,
            samples: self.samples,
            normalizer: self.normalizer.clone(),
            conditions: self.conditions.clone(),
            seed: self.seed,
            trained: self.trained,
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        let net = |n: Option<NetRecord>| n.map(NetRecord::into_mlp).transpose();
        let state = Self {
            kind: ck.model_kind,
            mode: ck.mode,
            series_len: ck.series_len,
            latent_dims: ck.latent_dims,
            encoder: net(ck.encoder)?,
            phys_encoder: net(ck.phys_encoder)?,
            decoder: net(ck.decoder)?,
            delta_decoder: net(ck.delta_decoder)?,
            kernels: ck.kernels,
            jitter: ck.jitter,
            train_kernel: ck.train_kernel,
            prior: ck.prior,
            alpha: ck.alpha,
            obs_sd_raw: ck.obs_sd_raw,
            samples: ck.samples,
            normalizer: ck.normalizer,
            conditions: ck.conditions,
            seed: ck.seed,
            trained: ck.trained,
        };
        state.check_components()?;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The networks present must be exactly those the kind uses.
    fn check_components(&self) -> Result<()> {
        let has = |n: &Option<Mlp>| n.is_some();
        let branch = self.latent_dims > 0;
        let expected = match self.kind {
            ModelKind::Vae | ModelKind::Gpvae => (true, false, true, false),
            ModelKind::Pivae => (false, true, false, false),
            ModelKind::Pigpvae => (branch, true, false, branch),
        };
        let found = (
            has(&self.encoder),
            has(&self.phys_encoder),
            has(&self.decoder),
            has(&self.delta_decoder),
        );
        if expected != found {
            return Err(Error::Format(format!(
                "checkpoint networks do not match a {} model",
                self.kind
            )));
        }
        if self.kind.has_gp_branch() && branch && self.kernels.is_empty() {
            return Err(Error::Format("checkpoint is missing kernel parameters".into()));
        }
        if !(self.normalizer.scale > 0.0) || self.series_len < 2 {
            return Err(Error::Format("invalid normalizer or series length".into()));
        }
        Ok(())
    }
}
