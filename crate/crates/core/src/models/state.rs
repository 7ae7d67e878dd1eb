use serde::{Deserialize, Serialize};

use crate::data::{Mode, Normalizer, SeriesBatch};
use crate::error::{Error, Result};
use crate::gp::KernelParams;
use crate::nets::tape::{softplus, softplus_inv};
use crate::nets::{Activation, Mat, Mlp, MlpVars, Tape, Var};
use crate::physics::{Condition, PhysicalPrior};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vae,
    Gpvae,
    Pivae,
    Pigpvae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Vae, ModelKind::Gpvae, ModelKind::Pivae, ModelKind::Pigpvae];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Gpvae => "gpvae",
            ModelKind::Pivae => "pivae",
            ModelKind::Pigpvae => "pigpvae",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Vae => "VAE",
            ModelKind::Gpvae => "GPVAE",
            ModelKind::Pivae => "PIVAE",
            ModelKind::Pigpvae => "PIGPVAE",
        }
    }

    /// Whether generation honours `(t0, ts)` conditioning.
    pub fn is_conditional(self) -> bool {
        matches!(self, ModelKind::Pivae | ModelKind::Pigpvae)
    }

    pub fn has_gp_branch(self) -> bool {
        matches!(self, ModelKind::Gpvae | ModelKind::Pigpvae)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Weight on the physics-fidelity penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Alpha {
    Fixed(f64),
    /// Effective weight `floor + softplus(raw)`.
    Trainable { raw: f64, floor: f64 },
}

impl Alpha {
    pub fn trainable(initial: f64, floor: f64) -> Result<Self> {
        if !(initial > floor) || floor < 0.0 {
            return Err(Error::Domain(format!(
                "trainable alpha needs initial {initial} > floor {floor} ≥ 0"
            )));
        }
        Ok(Alpha::Trainable {
            raw: softplus_inv(initial - floor),
            floor,
        })
    }

    pub fn effective(&self) -> f64 {
        match *self {
            Alpha::Fixed(v) => v,
            Alpha::Trainable { raw, floor } => floor + softplus(raw),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaConfig {
    pub value: f64,
    #[serde(default)]
    pub trainable: bool,
    #[serde(default = "AlphaConfig::default_floor")]
    pub floor: f64,
}

impl AlphaConfig {
    fn default_floor() -> f64 {
        0.1
    }

    fn build(&self) -> Result<Alpha> {
        if self.trainable {
            Alpha::trainable(self.value, self.floor)
        } else if self.value >= 0.0 {
            Ok(Alpha::Fixed(self.value))
        } else {
            Err(Error::Domain(format!("alpha must be non-negative, got {}", self.value)))
        }
    }
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self {
            value: 1.0,
            trainable: false,
            floor: Self::default_floor(),
        }
    }
}

/// Architecture and prior settings shared by all four model kinds. Fields a
/// kind does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Latent channels: `z` for vae/gpvae, the discrepancy branch for
    /// pigpvae (0 disables that branch).
    pub latent_dims: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub kernel: KernelParams,
    pub train_kernel: bool,
    /// One kernel per latent channel instead of a shared one.
    pub per_channel_kernels: bool,
    pub prior: PhysicalPrior,
    pub alpha: AlphaConfig,
    pub obs_sd: f64,
    /// Reparameterized draws per objective evaluation.
    pub samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Pigpvae,
            latent_dims: 1,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![32, 32],
            activation: Activation::Tanh,
            kernel: KernelParams::default(),
            train_kernel: true,
            per_channel_kernels: false,
            prior: PhysicalPrior::default(),
            alpha: AlphaConfig::default(),
            obs_sd: 0.1,
            samples: 1,
        }
    }
}

impl ModelConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        let latent_dims = match kind {
            ModelKind::Vae | ModelKind::Gpvae => 2,
            ModelKind::Pivae => 0,
            ModelKind::Pigpvae => 1,
        };
        Self {
            kind,
            latent_dims,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.prior.validate()?;
        if matches!(self.kind, ModelKind::Vae | ModelKind::Gpvae) && self.latent_dims == 0 {
            return Err(Error::Usage(format!("{} needs latent_dims ≥ 1", self.kind)));
        }
        if !(self.obs_sd >= ObsSd::FLOOR * 2.0) {
            return Err(Error::Domain(format!("obs_sd {} too small", self.obs_sd)));
        }
        if self.samples == 0 {
            return Err(Error::Usage("samples must be ≥ 1".into()));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(Error::Usage("hidden widths must be positive".into()));
        }
        self.alpha.build().map(|_| ())
    }
}

/// Observation noise sd `FLOOR + softplus(raw)` in normalized units.
pub struct ObsSd;

impl ObsSd {
    pub const FLOOR: f64 = 1e-4;

    pub fn raw_for(sd: f64) -> f64 {
        softplus_inv(sd - Self::FLOOR)
    }

    pub fn effective(raw: f64) -> f64 {
        Self::FLOOR + softplus(raw)
    }
}

/// Log-parameterized squared-exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelRaw {
    pub log_lengthscale: f64,
    pub log_variance: f64,
}

impl KernelRaw {
    pub fn from_params(p: &KernelParams) -> Self {
        Self {
            log_lengthscale: p.lengthscale.ln(),
            log_variance: p.variance.ln(),
        }
    }

    pub fn params(&self, jitter: f64) -> KernelParams {
        KernelParams {
            lengthscale: self.log_lengthscale.exp(),
            variance: self.log_variance.exp(),
            jitter,
        }
    }
}

/// Everything a trained (or freshly initialized) model consists of.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub kind: ModelKind,
    pub mode: Mode,
    pub series_len: usize,
    pub latent_dims: usize,
    /// vae: `[T, …, 2L]`; gpvae and pigpvae: `[T, …, 2·L·T]`.
    pub encoder: Option<Mlp>,
    /// pivae and pigpvae: `[T, …, 2]`.
    pub phys_encoder: Option<Mlp>,
    /// vae: `[L, …, T]`; gpvae: pointwise `[L, …, 1]`.
    pub decoder: Option<Mlp>,
    /// pigpvae: pointwise `[L + 1, …, 1]`.
    pub delta_decoder: Option<Mlp>,
    pub kernels: Vec<KernelRaw>,
    pub jitter: f64,
    pub train_kernel: bool,
    pub prior: PhysicalPrior,
    pub alpha: Alpha,
    pub obs_sd_raw: f64,
    pub samples: usize,
    pub normalizer: Normalizer,
    /// Conditions seen in training; resampled for in-distribution generation.
    pub conditions: Vec<Condition>,
    pub seed: u64,
    pub trained: bool,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl ModelState {
    /// Fresh parameters for `cfg.kind` sized to `batch`. Weights are drawn
    /// from `N(0, 1/fan_in)` under `seed`.
    pub fn init(cfg: &ModelConfig, batch: &SeriesBatch, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let t = batch.series_len();
        let l = cfg.latent_dims;
        let mut rng = rng::seeded(seed, rng::stream::INIT);
        let act = cfg.activation;
        let mut mlp = |w: Vec<usize>| Mlp::new(&w, act, None, &mut rng);
        let (mut encoder, mut phys_encoder, mut decoder, mut delta_decoder) = (None, None, None, None);
        match cfg.kind {
            ModelKind::Vae => {
                encoder = Some(mlp(widths(t, &cfg.encoder_hidden, 2 * l))?);
                decoder = Some(mlp(widths(l, &cfg.decoder_hidden, t))?);
            }
            ModelKind::Gpvae => {
                encoder = Some(mlp(widths(t, &cfg.encoder_hidden, 2 * l * t))?);
                decoder = Some(mlp(widths(l, &cfg.decoder_hidden, 1))?);
            }
            ModelKind::Pivae => {
                phys_encoder = Some(mlp(widths(t, &cfg.encoder_hidden, 2))?);
            }
            ModelKind::Pigpvae => {
                phys_encoder = Some(mlp(widths(t, &cfg.encoder_hidden, 2))?);
                if l > 0 {
                    encoder = Some(mlp(widths(t, &cfg.encoder_hidden, 2 * l * t))?);
                    delta_decoder = Some(mlp(widths(l + 1, &cfg.decoder_hidden, 1))?);
                }
            }
        }
        let n_kernels = match (cfg.kind.has_gp_branch() && l > 0, cfg.per_channel_kernels) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => l,
        };
        Ok(Self {
            kind: cfg.kind,
            mode: batch.mode(),
            series_len: t,
            latent_dims: if cfg.kind == ModelKind::Pivae { 0 } else { l },
            encoder,
            phys_encoder,
            decoder,
            delta_decoder,
            kernels: vec![KernelRaw::from_params(&cfg.kernel); n_kernels],
            jitter: cfg.kernel.jitter,
            train_kernel: cfg.train_kernel,
            prior: cfg.prior,
            alpha: cfg.alpha.build()?,
            obs_sd_raw: ObsSd::raw_for(cfg.obs_sd),
            samples: cfg.samples,
            normalizer: Normalizer::fit(batch),
            conditions: batch.conditions(),
            seed,
            trained: false,
        })
    }

    pub fn obs_sd(&self) -> f64 {
        ObsSd::effective(self.obs_sd_raw)
    }

    pub fn kernel_params(&self, channel: usize) -> KernelParams {
        let k = if self.kernels.len() > 1 {
            self.kernels[channel]
        } else {
            self.kernels[0]
        };
        k.params(self.jitter)
    }

    pub fn time_grid(&self) -> Vec<f64> {
        crate::data::unit_grid(self.series_len)
    }

    /// Networks in canonical parameter order.
    pub fn networks(&self) -> Vec<(&'static str, &Mlp)> {
        [
            ("encoder", &self.encoder),
            ("phys_encoder", &self.phys_encoder),
            ("decoder", &self.decoder),
            ("delta_decoder", &self.delta_decoder),
        ]
        .into_iter()
        .filter_map(|(name, net)| net.as_ref().map(|n| (name, n)))
        .collect()
    }

    fn networks_mut(&mut self) -> Vec<&mut Mlp> {
        [
            &mut self.encoder,
            &mut self.phys_encoder,
            &mut self.decoder,
            &mut self.delta_decoder,
        ]
        .into_iter()
        .filter_map(Option::as_mut)
        .collect()
    }

    /// Every parameter in canonical order: network weights and biases, then
    /// kernel log-parameters, then the alpha and observation-noise raws.
    /// The flag says whether the optimizer may change it.
    pub fn parameters(&self) -> Vec<(String, Mat, bool)> {
        let mut out = Vec::new();
        for (name, net) in self.networks() {
            for (i, p) in net.params().into_iter().enumerate() {
                let label = if i % 2 == 0 { "W" } else { "b" };
                out.push((format!("{name}.{label}{}", i / 2), p.clone(), true));
            }
        }
        for (i, k) in self.kernels.iter().enumerate() {
            out.push((format!("kernel{i}.log_lengthscale"), scalar(k.log_lengthscale), self.train_kernel));
            out.push((format!("kernel{i}.log_variance"), scalar(k.log_variance), self.train_kernel));
        }
        if let Alpha::Trainable { raw, .. } = self.alpha {
            out.push(("alpha_raw".into(), scalar(raw), true));
        }
        out.push(("obs_sd_raw".into(), scalar(self.obs_sd_raw), true));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.1.len()).sum()
    }

    /// Row-major flattening of [`ModelState::parameters`].
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.parameters().iter().flat_map(|p| row_major(&p.1)).collect()
    }

    /// Per-entry trainable mask aligned with [`ModelState::flat_parameters`].
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.parameters()
            .iter()
            .flat_map(|p| std::iter::repeat_n(p.2, p.1.len()))
            .collect()
    }

    /// Name of the parameter holding flat index `index`.
    pub fn parameter_name(&self, index: usize) -> String {
        let mut offset = 0;
        for (name, m, _) in self.parameters() {
            if index < offset + m.len() {
                let local = index - offset;
                return format!("{name}[{},{}]", local / m.ncols(), local % m.ncols());
            }
            offset += m.len();
        }
        format!("<out of range {index}>")
    }

    /// Inverse of [`ModelState::flat_parameters`].
    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.parameter_count();
        if flat.len() != expected {
            return Err(Error::Shape(format!("expected {expected} parameters, got {}", flat.len())));
        }
        let mut it = flat.iter().copied();
        for net in self.networks_mut() {
            for p in net.params_mut() {
                fill_row_major(p, &mut it);
            }
        }
        for k in &mut self.kernels {
            k.log_lengthscale = it.next().expect("length checked");
            k.log_variance = it.next().expect("length checked");
        }
        if let Alpha::Trainable { raw, .. } = &mut self.alpha {
            *raw = it.next().expect("length checked");
        }
        self.obs_sd_raw = it.next().expect("length checked");
        Ok(())
    }

    /// Records every parameter on `tape` in canonical order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let mut leaves = Vec::new();
        let mut bind_net = |net: &Option<Mlp>| {
            net.as_ref().map(|n| {
                let vars = n.bind(tape);
                leaves.extend(vars.vars());
                vars
            })
        };
        let encoder = bind_net(&self.encoder);
        let phys_encoder = bind_net(&self.phys_encoder);
        let decoder = bind_net(&self.decoder);
        let delta_decoder = bind_net(&self.delta_decoder);
        let mut kernels = Vec::new();
        for k in &self.kernels {
            let log_ls = tape.scalar(k.log_lengthscale);
            let log_var = tape.scalar(k.log_variance);
            leaves.push(log_ls);
            leaves.push(log_var);
            kernels.push((log_ls.exp(), log_var.exp()));
        }
        let alpha = match self.alpha {
            Alpha::Fixed(v) => tape.scalar(v),
            Alpha::Trainable { raw, floor } => {
                let r = tape.scalar(raw);
                leaves.push(r);
                r.softplus() + floor
            }
        };
        let obs_raw = tape.scalar(self.obs_sd_raw);
        leaves.push(obs_raw);
        Bound {
            encoder,
            phys_encoder,
            decoder,
            delta_decoder,
            kernels,
            alpha,
            obs_sd: obs_raw.softplus() + ObsSd::FLOOR,
            leaves,
        }
    }

    pub(crate) fn require_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Usage(format!(
                "objective for {kind} called on a {} model",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn require_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::Usage("model has not been trained".into()));
        }
        Ok(())
    }
}

fn scalar(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

pub(crate) fn row_major(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn fill_row_major(m: &mut Mat, it: &mut impl Iterator<Item = f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] = it.next().expect("length checked");
        }
    }
}

/// A [`ModelState`] recorded on a tape.
pub struct Bound<'t> {
    pub encoder: Option<MlpVars<'t>>,
    pub phys_encoder: Option<MlpVars<'t>>,
    pub decoder: Option<MlpVars<'t>>,
    pub delta_decoder: Option<MlpVars<'t>>,
    /// `(lengthscale, variance)` per kernel, already exponentiated.
    pub kernels: Vec<(Var<'t>, Var<'t>)>,
    pub alpha: Var<'t>,
    pub obs_sd: Var<'t>,
    /// Raw parameter leaves in canonical order.
    pub leaves: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn kernel(&self, channel: usize) -> (Var<'t>, Var<'t>) {
        if self.kernels.len() > 1 {
            self.kernels[channel]
        } else {
            self.kernels[0]
        }
    }

    /// Gradient flattened in the order of [`ModelState::flat_parameters`].
    pub fn flat_gradient(&self, grads: &crate::nets::Gradients) -> Vec<f64> {
        self.leaves
            .iter()
            .flat_map(|&v| row_major(&grads.wrt(v)))
            .collect()
    }
}
