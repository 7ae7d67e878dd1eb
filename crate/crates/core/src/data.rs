//! Heating and cooling curve datasets.
//!
//! A [`SeriesBatch`] holds equal-length temperature curves in °C on a time
//! grid normalized to `[0, 1]`, together with the surrounding temperature of
//! every curve. The initial temperature is always the first sample.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, KernelParams};
use crate::physics::{newton_solution, Condition};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Heating,
    Cooling,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Heating => "heating",
            Mode::Cooling => "cooling",
        }
    }

    /// Heating when the surroundings are warmer than the start, cooling when
    /// colder. A tie has no direction and is rejected.
    pub fn infer(t0: f64, ts: f64) -> Option<Mode> {
        if ts > t0 {
            Some(Mode::Heating)
        } else if ts < t0 {
            Some(Mode::Cooling)
        } else {
            None
        }
    }

    /// Whether `(t0, ts)` is ordered consistently with this mode.
    pub fn admits(self, t0: f64, ts: f64) -> bool {
        match self {
            Mode::Heating => ts >= t0,
            Mode::Cooling => ts <= t0,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `i / (len − 1)` for `i = 0..len`.
pub fn unit_grid(len: usize) -> Vec<f64> {
    (0..len).map(|i| i as f64 / (len - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesBatch {
    ids: Vec<String>,
    values: Vec<Vec<f64>>,
    time_grid: Vec<f64>,
    ts: Vec<f64>,
    mode: Mode,
}

impl SeriesBatch {
    pub fn new(ids: Vec<String>, values: Vec<Vec<f64>>, ts: Vec<f64>, mode: Mode) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("a batch needs at least one curve".into()));
        }
        let len = values[0].len();
        if len < 2 {
            return Err(Error::Shape("curves need at least two time steps".into()));
        }
        if ids.len() != values.len() || ts.len() != values.len() {
            return Err(Error::Shape("ids, values and ts lengths differ".into()));
        }
        for (id, (row, &s)) in ids.iter().zip(values.iter().zip(&ts)) {
            if row.len() != len {
                return Err(Error::Shape(format!(
                    "series {id} has {} steps, expected {len}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) || !s.is_finite() {
                return Err(Error::Domain(format!("series {id} has non-finite values")));
            }
            if !mode.admits(row[0], s) {
                return Err(Error::Domain(format!(
                    "series {id}: t0 {} and ts {s} inconsistent with {mode}",
                    row[0]
                )));
            }
        }
        Ok(Self {
            ids,
            values,
            time_grid: unit_grid(len),
            ts,
            mode,
        })
    }

    /// Like [`SeriesBatch::new`] with ids `0..n`.
    pub fn from_values(values: Vec<Vec<f64>>, ts: Vec<f64>, mode: Mode) -> Result<Self> {
        let ids = (0..values.len()).map(|i| i.to_string()).collect();
        Self::new(ids, values, ts, mode)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn series_len(&self) -> usize {
        self.time_grid.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    pub fn ts(&self) -> &[f64] {
        &self.ts
    }

    pub fn t0(&self, i: usize) -> f64 {
        self.values[i][0]
    }

    pub fn t0s(&self) -> Vec<f64> {
        self.values.iter().map(|r| r[0]).collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.values
            .iter()
            .zip(&self.ts)
            .map(|(r, &ts)| Condition { t0: r[0], ts })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.ids[i].clone()).collect(),
            indices.iter().map(|&i| self.values[i].clone()).collect(),
            indices.iter().map(|&i| self.ts[i]).collect(),
            self.mode,
        )
    }
}

const CSV_HEADER: [&str; 4] = ["series_id", "t_index", "temperature", "system_temperature"];

struct RawSeries {
    id: String,
    points: Vec<(usize, f64, f64)>,
}

/// Reads the long-format CSV `series_id,t_index,temperature,system_temperature`.
///
/// Returns one batch per mode present, heating first. The surrounding
/// temperature of a curve is the mean of its `system_temperature` column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<SeriesBatch>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv(reader: impl std::io::Read) -> Result<Vec<SeriesBatch>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 4];
    for (slot, name) in cols.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))?;
    }

    let mut order: Vec<RawSeries> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let id = field(cols[0]).to_string();
        let t_index: usize = field(cols[1]).parse().map_err(|_| Error::Parse {
            row,
            detail: format!("t_index `{}` is not a non-negative integer", field(cols[1])),
        })?;
        let number = |c: usize, name: &str| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    detail: format!("{name} `{}` is not a number", field(c)),
                })
        };
        let temp = number(cols[2], "temperature")?;
        let sys = number(cols[3], "system_temperature")?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(RawSeries {
                id,
                points: Vec::new(),
            });
            order.len() - 1
        });
        order[slot].points.push((t_index, temp, sys));
    }
    if order.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }

    let mut len = None;
    let mut heating = (Vec::new(), Vec::new(), Vec::new());
    let mut cooling = (Vec::new(), Vec::new(), Vec::new());
    for mut series in order {
        series.points.sort_by_key(|p| p.0);
        let complete = series.points.iter().enumerate().all(|(i, p)| p.0 == i);
        if !complete {
            return Err(Error::Shape(format!(
                "series {} does not cover t_index 0..{} exactly once",
                series.id,
                series.points.len()
            )));
        }
        let n = series.points.len();
        match len {
            None => len = Some(n),
            Some(expected) if expected != n => {
                return Err(Error::Shape(format!(
                    "series {} has {n} steps, expected {expected}",
                    series.id
                )))
            }
            _ => {}
        }
        let values: Vec<f64> = series.points.iter().map(|p| p.1).collect();
        // offset from the first sample keeps a constant channel exact
        let first = series.points[0].2;
        let ts = first + series.points.iter().map(|p| p.2 - first).sum::<f64>() / n as f64;
        let target = match Mode::infer(values[0], ts) {
            Some(Mode::Heating) => &mut heating,
            Some(Mode::Cooling) => &mut cooling,
            None => {
                return Err(Error::Domain(format!(
                    "series {}: initial and surrounding temperature are equal, mode is ambiguous",
                    series.id
                )))
            }
        };
        target.0.push(series.id);
        target.1.push(values);
        target.2.push(ts);
    }

    let mut out = Vec::new();
    for (mode, (ids, values, ts)) in [(Mode::Heating, heating), (Mode::Cooling, cooling)] {
        if !ids.is_empty() {
            out.push(SeriesBatch::new(ids, values, ts, mode)?);
        }
    }
    Ok(out)
}

/// Writes batches in the long format read by [`load_csv`].
pub fn write_csv(path: impl AsRef<Path>, batches: &[&SeriesBatch]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(file, batches)
}

pub fn write_csv_to(writer: impl std::io::Write, batches: &[&SeriesBatch]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for batch in batches {
        for ((id, row), ts) in batch.ids.iter().zip(&batch.values).zip(&batch.ts) {
            for (t, v) in row.iter().enumerate() {
                w.write_record([id.clone(), t.to_string(), v.to_string(), ts.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// "Missing physics" in surrogate curves: the exchange rate ramps up after
/// the start and fluctuates along a GP path `g`,
/// `k(u) = k·(1 − e^{−u/onset})·e^{g(u) − a²/2}`.
/// Newton's law has neither effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Marginal sd `a` of the log-rate path. Zero disables the whole
    /// distortion, onset included.
    pub amplitude: f64,
    pub lengthscale: f64,
    /// Time constant of the ramp-up, on the unit time axis; 0 means none.
    pub onset: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.6,
            lengthscale: 0.15,
            onset: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub n: usize,
    pub len: usize,
    pub mode: Mode,
    pub k_mean: f64,
    pub k_sd: f64,
    /// Range of initial temperatures, °C.
    pub t0_range: (f64, f64),
    /// Range of `|Ts − T0|`, °C.
    pub gap_range: (f64, f64),
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            n: 29,
            len: 24,
            mode: Mode::Heating,
            k_mean: 2.0,
            k_sd: 0.4,
            t0_range: (15.0, 24.0),
            gap_range: (4.0, 9.0),
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    /// Defaults for a mode: heating starts cool, cooling starts warm.
    pub fn for_mode(mode: Mode, n: usize, seed: u64) -> Self {
        let t0_range = match mode {
            Mode::Heating => (15.0, 24.0),
            Mode::Cooling => (18.0, 28.0),
        };
        Self {
            n,
            mode,
            t0_range,
            seed,
            ..Self::default()
        }
    }
}

/// Newton curves with rates `k ~ N(k_mean, k_sd²)` (clipped positive), plus
/// a zero-mean GP distortion pinned to zero at `t = 0` so every curve starts
/// exactly at its drawn `T0`.
pub fn synthesize_surrogate(cfg: &SurrogateConfig) -> Result<SeriesBatch> {
    if !(cfg.k_mean > 0.0) {
        return Err(Error::Domain(format!("k_mean must be positive, got {}", cfg.k_mean)));
    }
    if !(cfg.k_sd >= 0.0) || cfg.n == 0 || cfg.len < 2 {
        return Err(Error::Domain("surrogate needs n ≥ 1, len ≥ 2, k_sd ≥ 0".into()));
    }
    let (lo, hi) = cfg.t0_range;
    let (glo, ghi) = cfg.gap_range;
    if !(hi >= lo) || !(ghi >= glo) || glo < 0.0 {
        return Err(Error::Domain("invalid temperature ranges".into()));
    }
    let noise = &cfg.noise;
    if !(noise.amplitude >= 0.0) || !(noise.onset >= 0.0) || (noise.amplitude > 0.0 && !(noise.lengthscale > 0.0)) {
        return Err(Error::Domain("distortion needs amplitude ≥ 0, onset ≥ 0, lengthscale > 0".into()));
    }
    let grid = unit_grid(cfg.len);
    let mut rng = rng::seeded(cfg.seed, rng::stream::SURROGATE);
    let t0_dist = Uniform::new_inclusive(lo, hi).map_err(|e| Error::Domain(e.to_string()))?;
    let gap_dist = Uniform::new_inclusive(glo, ghi).map_err(|e| Error::Domain(e.to_string()))?;
    let k_dist = Normal::new(cfg.k_mean, cfg.k_sd).map_err(|e| Error::Domain(e.to_string()))?;

    let distortion = if cfg.noise.amplitude > 0.0 {
        let params = KernelParams {
            lengthscale: cfg.noise.lengthscale,
            variance: cfg.noise.amplitude * cfg.noise.amplitude,
            jitter: 1e-8,
        };
        let k = gp::kernel_matrix(&grid, &params)?;
        let mut noise_rng = rng::seeded(cfg.seed, rng::stream::SURROGATE_NOISE);
        Some(gp::sample_rows(&k, params.jitter, cfg.n, &mut noise_rng)?)
    } else {
        None
    };

    let mut values = Vec::with_capacity(cfg.n);
    let mut ts = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let t0 = t0_dist.sample(&mut rng);
        let gap = gap_dist.sample(&mut rng);
        let k = k_dist.sample(&mut rng).max(1e-3);
        let s = match cfg.mode {
            Mode::Heating => t0 + gap,
            Mode::Cooling => t0 - gap,
        };
        let mut curve = newton_solution(&grid, t0, s, k);
        if let Some(d) = &distortion {
            // the accumulated exchange stays increasing, so the curve is monotone
            // and never leaves [T0, Ts]
            let half_var = 0.5 * cfg.noise.amplitude * cfg.noise.amplitude;
            let onset = cfg.noise.onset;
            let ramp = |u: f64| if onset > 0.0 { 1.0 - (-u / onset).exp() } else { 1.0 };
            let rate = |t: usize| k * ramp(grid[t]) * (d[(i, t)] - half_var).exp();
            let mut exchange = 0.0;
            for t in 1..grid.len() {
                let (a, b) = (rate(t - 1), rate(t));
                exchange += 0.5 * (a + b) * (grid[t] - grid[t - 1]);
                curve[t] = s + (t0 - s) * (-exchange).exp();
            }
        }
        curve[0] = t0;
        values.push(curve);
        ts.push(s);
    }
    SeriesBatch::from_values(values, ts, cfg.mode)
}

/// Affine map `x ↦ (x − shift) / scale` fitted on a training batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: f64,
    pub scale: f64,
    pub fitted_on: String,
}

impl Normalizer {
    pub const SCALE_FLOOR: f64 = 1e-8;

    pub fn fit(batch: &SeriesBatch) -> Self {
        let all: Vec<f64> = batch.values.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut scale = var.sqrt();
        if !(scale > Self::SCALE_FLOOR) {
            warn!("zero-variance batch; normalizer scale floored at {}", Self::SCALE_FLOOR);
            scale = Self::SCALE_FLOOR;
        }
        Self {
            shift: mean,
            scale,
            fitted_on: fingerprint(&all),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.scale + self.shift
    }

    pub fn apply_batch(&self, batch: &SeriesBatch) -> Vec<Vec<f64>> {
        batch
            .values
            .iter()
            .map(|r| r.iter().map(|&v| self.apply(v)).collect())
            .collect()
    }
}

/// FNV-1a over the bit patterns of `values`.
pub fn fingerprint(values: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub ood_cutoff: Option<f64>,
}

/// Draws a training subset; the evaluation set is always the full batch.
///
/// With a cutoff, only curves starting at or above it are candidates, and
/// the fraction applies to the candidates.
pub fn split(batch: &SeriesBatch, spec: &SplitSpec) -> Result<(SeriesBatch, SeriesBatch)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "train_fraction {} outside (0, 1]",
            spec.train_fraction
        )));
    }
    let mut candidates: Vec<usize> = (0..batch.len())
        .filter(|&i| spec.ood_cutoff.is_none_or(|c| batch.t0(i) >= c))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyTrain(format!(
            "no {} curve starts at or above the cutoff {:?}",
            batch.mode,
            spec.ood_cutoff
        )));
    }
    let size = ((spec.train_fraction * candidates.len() as f64).round() as usize).max(1);
    let mut rng = rng::seeded(spec.seed, rng::stream::SPLIT);
    candidates.shuffle(&mut rng);
    candidates.truncate(size);
    Ok((batch.subset(&candidates)?, batch.clone()))
}
