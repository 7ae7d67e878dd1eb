//! The acceptance gate: one PASS/FAIL line per criterion, written straight to
//! stderr so it shows up without `--nocapture`.

use std::f64::consts::PI;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use pigpvae::data::*;
use pigpvae::gp::*;
use pigpvae::metrics::*;
use pigpvae::models::*;
use pigpvae::nets::tape::softplus;
use pigpvae::nets::{DiagGaussian, Mat, Tape};
use pigpvae::physics::*;
use pigpvae::rng;
use pigpvae::training::{grad_check_model, train, TrainConfig};
use pigpvae_cli::config::{Overrides, RunConfig};
use pigpvae_cli::experiment::ExperimentTable;
use pigpvae_cli::output::Manifest;
use rand::Rng;
use serde_json::json;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_time(started: Instant, limit_s: f64) -> Result<f64, String> {
    let s = started.elapsed().as_secs_f64();
    ensure(s <= limit_s, format!("took {s:.1} s, limit {limit_s} s"))?;
    Ok(s)
}

// 1 ─ gradients of all four objectives

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for inst in 0..3u64 {
        let mut r = rng::seeded(inst, 900);
        let mut sc = SurrogateConfig::for_mode(Mode::Heating, r.random_range(2..=3), inst);
        sc.len = r.random_range(3..=6);
        let batch = synthesize_surrogate(&sc).map_err(|e| e.to_string())?;
        for kind in ModelKind::ALL {
            let cfg = ModelConfig {
                encoder_hidden: vec![4],
                decoder_hidden: vec![4],
                alpha: AlphaConfig { value: 0.7, trainable: true, floor: 0.1 },
                ..ModelConfig::for_kind(kind)
            };
            let state = ModelState::init(&cfg, &batch, inst + 10).map_err(|e| e.to_string())?;
            let rep = grad_check_model(&state, &batch, inst + 20, 1e-5, 1e-4).map_err(|e| e.to_string())?;
            ensure(rep.passed, format!("{kind} instance {inst}: {rep:?}"))?;
            worst = worst.max(rep.max_rel_error);
        }
    }
    let s = within_time(started, 30.0)?;
    Ok(format!("max relative error {worst:.2e} over 12 checks, {s:.1} s"))
}

// 2 ─ GP oracle and posterior limits

fn dense_kernel(t: &[f64], p: &KernelParams) -> Mat {
    Mat::from_fn(t.len(), t.len(), |i, j| {
        let d = t[i] - t[j];
        p.variance * (-d * d / (2.0 * p.lengthscale * p.lengthscale)).exp() + if i == j { p.jitter } else { 0.0 }
    })
}

fn dense_mvn_logpdf(x: &[f64], cov: &Mat) -> f64 {
    let n = x.len();
    let xv = Mat::from_column_slice(n, 1, x);
    let quad = (xv.transpose() * cov.clone().try_inverse().unwrap() * &xv)[(0, 0)];
    -0.5 * quad - 0.5 * cov.clone().lu().determinant().ln() - 0.5 * n as f64 * (2.0 * PI).ln()
}

fn gp_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut r = rng::seeded(seed, 901);
        let len = r.random_range(1..=8);
        let channels = r.random_range(1..=3);
        let mut t = vec![r.random_range(0.0..0.1)];
        for _ in 1..len {
            let last = *t.last().unwrap();
            t.push(last + r.random_range(0.02..0.3));
        }
        let targets = Mat::from_fn(channels, len, |_, _| r.random_range(-2.0..2.0));
        let noise = Mat::from_fn(channels, len, |_, _| r.random_range(0.05..1.5));
        let params = KernelParams {
            lengthscale: r.random_range(0.05..1.0),
            variance: r.random_range(0.2..3.0),
            jitter: 1e-6,
        };
        let k = dense_kernel(&t, &params);
        let oracle: f64 = (0..channels)
            .map(|l| {
                let d = Mat::from_diagonal(&noise.row(l).transpose().map(|s| s * s));
                dense_mvn_logpdf(&targets.row(l).iter().copied().collect::<Vec<_>>(), &(&k + d))
            })
            .sum();
        let pseudo = PseudoObservations::new(targets, noise).unwrap();
        let got = gp_log_marginal(&t, &pseudo, &params).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle).abs());
    }
    ensure(worst <= 1e-8, format!("log-marginal gap {worst:.2e} > 1e-8"))?;

    let (mut prior_gap, mut interp_gap, mut draw_gap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for seed in 0..30 {
        let mut r = rng::seeded(seed, 902);
        let len = r.random_range(2..=8);
        let t: Vec<f64> = (0..len).map(|i| i as f64 * 0.3).collect();
        let params = KernelParams {
            lengthscale: r.random_range(0.1..0.5),
            variance: r.random_range(0.5..2.0),
            jitter: 1e-9,
        };
        let targets = Mat::from_fn(2, len, |_, _| r.random_range(-1.0..1.0));
        let k = kernel_matrix(&t, &params).unwrap();
        let wide = PseudoObservations::new(targets.clone(), Mat::from_element(2, len, 1e6)).unwrap();
        let post = gp_posterior(&t, &wide, &params).map_err(|e| e.to_string())?;
        prior_gap = prior_gap.max(post.mean.abs().max()).max((&post.cov[0] - &k).abs().max() / k.abs().max());
        let tight = PseudoObservations::new(targets.clone(), Mat::from_element(2, len, 1e-6)).unwrap();
        let post = gp_posterior(&t, &tight, &params).map_err(|e| e.to_string())?;
        interp_gap = interp_gap.max((&post.mean - &targets).abs().max());
        let draw = sample_posterior(&post, seed).map_err(|e| e.to_string())?;
        draw_gap = draw_gap.max((draw - &targets).abs().max());
    }
    ensure(prior_gap < 1e-6, format!("prior recovery gap {prior_gap:.2e}"))?;
    ensure(interp_gap < 1e-4, format!("interpolation gap {interp_gap:.2e}"))?;
    ensure(draw_gap < 1e-3, format!("posterior draw gap {draw_gap:.2e}"))?;
    Ok(format!(
        "dense-oracle gap {worst:.1e}; prior recovery {prior_gap:.1e}, interpolation {interp_gap:.1e}, draws {draw_gap:.1e}"
    ))
}

// 3 ─ KL against quadrature

fn normal_pdf(x: f64, m: f64, s: f64) -> f64 {
    (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt())
}

fn kl_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let n = 40_000;
    let (a, b) = (mq - 14.0 * sq, mq + 14.0 * sq);
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let lr = (sp / sq).ln() - (x - mq).powi(2) / (2.0 * sq * sq) + (x - mp).powi(2) / (2.0 * sp * sp);
        normal_pdf(x, mq, sq) * lr
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn kl_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut r = rng::seeded(3, 903);
    for _ in 0..50 {
        let (mq, sq) = (r.random_range(-2.0..2.0), r.random_range(0.1..2.0));
        let (mp, sp) = (r.random_range(-2.0..2.0), r.random_range(0.2..2.0));
        let kl = kl_gauss_gauss(&DiagGaussian::new(vec![mq], vec![sq]).unwrap(), &PhysicalPrior { mean: mp, sd: sp })
            .map_err(|e| e.to_string())?;
        worst = worst.max((kl - kl_quadrature(mq, sq, mp, sp)).abs());
        let tape = Tape::new();
        let std = kl_standard_normal_var(tape.scalar(mq), tape.scalar(sq)).item();
        worst = worst.max((std - kl_quadrature(mq, sq, 0.0, 1.0)).abs());
    }
    ensure(worst <= 1e-6, format!("quadrature gap {worst:.2e}"))?;
    let half = kl_gauss_gauss(&DiagGaussian::new(vec![0.0], vec![1.0]).unwrap(), &PhysicalPrior { mean: 1.0, sd: 1.0 })
        .map_err(|e| e.to_string())?;
    ensure((half - 0.5).abs() <= 1e-12, format!("KL(N(0,1)‖N(1,1)) = {half}"))?;
    Ok(format!("quadrature gap {worst:.1e} over 100 evaluations; KL(N(0,1)‖N(1,1)) = {half}"))
}

// 4 ─ physics

fn physics() -> Outcome {
    let grid = unit_grid(24);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut r = rng::seeded(4, 904);
    for _ in 0..50 {
        let z: f64 = r.random_range(-3.0..3.0);
        let cond = Condition { t0: r.random_range(0.0..40.0), ts: r.random_range(0.0..40.0) };
        let k = softplus(z);
        let x = physical_decode(z, &grid, cond, None);
        for (i, &t) in grid.iter().enumerate() {
            let up = physical_decode(z, &[t + h], cond, None)[0];
            let down = physical_decode(z, &[t - h], cond, None)[0];
            worst = worst.max(((up - down) / (2.0 * h) + k * (x[i] - cond.ts)).abs());
        }
    }
    ensure(worst <= 1e-5, format!("ODE residual {worst:.2e}"))?;
    let v = newton_solution(&[10.0], 30.0, 20.0, 0.1)[0];
    let expect = 20.0 + 10.0 * (-1.0f64).exp();
    ensure((v - expect).abs() <= 1e-10, format!("worked value {v}"))?;
    Ok(format!("max ODE residual {worst:.1e} on 50 random curves; T(10) = {v:.10}"))
}

// 5 ─ metrics

fn gauss(a: &[f64], b: &[f64], s: f64) -> f64 {
    (-a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / (2.0 * s * s)).exp()
}

fn mmd_ref(x: &[Vec<f64>], y: &[Vec<f64>], s: f64) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let within = |a: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..a.len() {
            for j in 0..a.len() {
                if i != j {
                    t += gauss(&a[i], &a[j], s);
                }
            }
        }
        t
    };
    let cross: f64 = x.iter().flat_map(|a| y.iter().map(move |b| gauss(a, b, s))).sum();
    within(x) / (n * (n - 1.0)) + within(y) / (m * (m - 1.0)) - 2.0 * cross / (n * m)
}

fn column(x: &[Vec<f64>], t: usize) -> Vec<f64> {
    x.iter().map(|r| r[t]).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum();
    let va: f64 = a.iter().map(|u| (u - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn cd_ref(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let len = x[0].len();
    let mut total = 0.0;
    for i in 0..len {
        for j in 0..len {
            total += (pearson(&column(x, i), &column(x, j)) - pearson(&column(y, i), &column(y, j))).abs();
        }
    }
    total
}

fn mdd_ref(x: &[Vec<f64>], y: &[Vec<f64>], bins: usize) -> f64 {
    let len = x[0].len();
    let mut total = 0.0;
    for t in 0..len {
        let (cx, cy) = (column(x, t), column(y, t));
        let lo = cx.iter().chain(&cy).cloned().fold(f64::MAX, f64::min);
        let hi = cx.iter().chain(&cy).cloned().fold(f64::MIN, f64::max);
        let edge = |b: usize| lo + (hi - lo) * b as f64 / bins as f64;
        let share = |v: &[f64], b: usize| {
            v.iter().filter(|&&u| u >= edge(b) && (u < edge(b + 1) || (b == bins - 1 && u <= hi))).count() as f64
                / v.len() as f64
        };
        total += (0..bins).map(|b| (share(&cx, b) - share(&cy, b)).abs()).sum::<f64>() / bins as f64;
    }
    total / len as f64
}

fn random_set(r: &mut impl Rng, n: usize, len: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let base: f64 = r.random_range(-1.0..1.0);
            (0..len).map(|t| shift + base * t as f64 * 0.3 + r.random_range(-1.0..1.0)).collect()
        })
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut r = rng::seeded(5, 905);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let len = r.random_range(2..8);
        let (n, m) = (r.random_range(3..15), r.random_range(3..15));
        let x = random_set(&mut r, n, len, 0.0);
        let y = random_set(&mut r, m, len, trial as f64 * 0.1);
        let mmd = mmd2_unbiased(&x, &y, Some(1.3)).map_err(|e| e.to_string())?;
        worst = worst.max((mmd.mmd2 - mmd_ref(&x, &y, 1.3)).abs());
        let auto = mmd2_unbiased(&x, &y, None).map_err(|e| e.to_string())?;
        worst = worst.max((auto.mmd2 - mmd_ref(&x, &y, auto.bandwidth)).abs());
        worst = worst.max((correlation_difference(&x, &y).unwrap().cd - cd_ref(&x, &y)).abs());
        worst = worst.max((marginal_distribution_difference(&x, &y, 50).unwrap() - mdd_ref(&x, &y, 50)).abs());
    }
    ensure(worst <= 1e-12, format!("brute-force gap {worst:.2e}"))?;

    let x = random_set(&mut r, 9, 6, 0.0);
    ensure(correlation_difference(&x, &x).unwrap().cd == 0.0, "identical-set CD ≠ 0")?;
    ensure(marginal_distribution_difference(&x, &x, 50).unwrap() == 0.0, "identical-set MDD ≠ 0")?;
    let s = 2.0;
    let m = x.len() as f64;
    let mut kbar = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kbar += gauss(&x[i], &x[j], s);
            }
        }
    }
    kbar /= m * (m - 1.0);
    let same = mmd2_unbiased(&x, &x, Some(s)).unwrap().mmd2;
    ensure((same - 2.0 * (kbar - 1.0) / m).abs() <= 1e-12, "identical-set MMD ≠ 2(k̄−1)/m")?;

    let pool = random_set(&mut r, 300, 5, 0.0);
    let reps = 200;
    let vals: Vec<f64> = (0..reps)
        .map(|_| {
            let mut draw = || (0..25).map(|_| pool[r.random_range(0..pool.len())].clone()).collect::<Vec<_>>();
            let (a, b) = (draw(), draw());
            mmd2_unbiased(&a, &b, None).unwrap().mmd2
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / reps as f64;
    let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0)).sqrt() / (reps as f64).sqrt();
    ensure(mean.abs() < 3.0 * se, format!("null mean {mean:.2e} vs 3·se {:.2e}", 3.0 * se))?;
    Ok(format!("brute-force gap {worst:.1e}; identities exact; null mean {mean:.1e} (3·se {:.1e})", 3.0 * se))
}

// 6 ─ parameter recovery, through the CLI's train command

/// Resolves a config file exactly as the binary does, writing into `dir`.
fn config_in(dir: &Path, doc: serde_json::Value) -> RunConfig {
    let path = dir.join("config.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    let overrides = Overrides { output_dir: Some(dir.join("out")), ..Overrides::default() };
    RunConfig::resolve(Some(&path), &overrides).unwrap()
}

fn recovery() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config_in(
        dir.path(),
        json!({
            "data": {
                "surrogate": {"heating_n": 20, "cooling_n": 0, "k_sd": 0.0, "noise": {"amplitude": 0.0}},
                "train_fraction": 1.0,
            },
            "model": {"kind": "pivae"},
        }),
    );
    pigpvae_cli::cmd_train(&cfg).map_err(|e| e.line())?;
    let text = std::fs::read_to_string(dir.path().join("out/train_summary.json")).map_err(|e| e.to_string())?;
    let summary: pigpvae_cli::commands::TrainSummary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let k = summary.mean_rate.ok_or("no rate reported")?;
    ensure(summary.n_train == 20 && summary.epochs == 3000, "not the default 20-curve, 3000-epoch run")?;
    ensure((k - 2.0).abs() <= 0.2 * 2.0, format!("mean posterior k = {k:.4}, truth 2.0"))?;
    let s = within_time(started, 120.0)?;
    Ok(format!("mean posterior k = {k:.4} (truth 2.0, {:.1}% off), {s:.1} s", 100.0 * (k - 2.0).abs() / 2.0))
}

// 7 ─ ordering on the in-distribution experiment

fn ordering() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config_in(dir.path(), json!({"experiment": {"case": "in_dist"}}));
    pigpvae_cli::cmd_experiment(&cfg, 1).map_err(|e| e.line())?;
    let table = ExperimentTable::load(&dir.path().join("out")).map_err(|e| e.line())?;
    ensure(table.seeds.len() == 5, "expected 5 seeds")?;
    let mut notes = Vec::new();
    for mode in [Mode::Heating, Mode::Cooling] {
        let get = |k: ModelKind| {
            let c = table.row(mode, k).ok_or(format!("{mode} {k} missing"))?;
            Ok::<_, String>((c.mmd2.as_ref().unwrap().mean, c.mdd.as_ref().unwrap().mean))
        };
        let (g, p, pg) = (get(ModelKind::Gpvae)?, get(ModelKind::Pivae)?, get(ModelKind::Pigpvae)?);
        ensure(
            pg.0 <= g.0 && pg.0 <= p.0,
            format!("{mode} MMD: PIGPVAE {:.4}, GPVAE {:.4}, PIVAE {:.4}", pg.0, g.0, p.0),
        )?;
        ensure(
            pg.1 <= g.1 && pg.1 <= p.1,
            format!("{mode} MDD: PIGPVAE {:.4}, GPVAE {:.4}, PIVAE {:.4}", pg.1, g.1, p.1),
        )?;
        notes.push(format!(
            "{mode} MMD {:.4}/{:.4}/{:.4} MDD {:.4}/{:.4}/{:.4}",
            pg.0, g.0, p.0, pg.1, g.1, p.1
        ));
    }
    let s = within_time(started, 600.0)?;
    Ok(format!("PIGPVAE/GPVAE/PIVAE means: {}; {s:.0} s", notes.join("; ")))
}

// 8 ─ out-of-distribution generation

fn out_of_distribution() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config_in(
        dir.path(),
        json!({"experiment": {"case": "out_dist", "cutoff": 20.0, "modes": ["heating"], "seeds": 1}}),
    );
    pigpvae_cli::cmd_experiment(&cfg, 1).map_err(|e| e.line())?;
    let table = ExperimentTable::load(&dir.path().join("out")).map_err(|e| e.line())?;
    let mut notes = Vec::new();
    for kind in [ModelKind::Pivae, ModelKind::Pigpvae] {
        let cell_dir = dir.path().join(format!("out/cells/heating_{kind}"));
        let state = ModelState::load(cell_dir.join("checkpoint_seed0.json")).map_err(|e| e.to_string())?;
        ensure(state.conditions.iter().all(|c| c.t0 >= 20.0), format!("{kind} trained below the cutoff"))?;
        // inspect the emitted curves directly
        let gen = load_csv(cell_dir.join("ood_generated.csv")).map_err(|e| e.to_string())?.remove(0);
        let probe = table.row(Mode::Heating, kind).and_then(|c| c.probe.clone()).ok_or("probe missing")?;
        let (t0, ts) = (probe.requested.t0, probe.requested.ts);
        ensure(t0 == 17.0, "probe not at 17 °C")?;
        let start_err = gen.values().iter().map(|r| (r[0] - t0).abs()).fold(0.0, f64::max);
        let between = gen.values().iter().all(|r| {
            let last = r[r.len() - 1];
            last > t0.min(ts) && last < t0.max(ts)
        });
        ensure(start_err <= 0.5, format!("{kind} start error {start_err:.3} °C"))?;
        ensure(between, format!("{kind}: a final value is outside ({t0}, {ts:.2})"))?;
        notes.push(format!("{kind} start error {start_err:.3}, {} finals inside", gen.len()));
    }
    let g = table.row(Mode::Heating, ModelKind::Gpvae).and_then(|c| c.probe.clone()).ok_or("gpvae probe missing")?;
    ensure(!g.conditioned && table.cannot_condition == ["GPVAE"], "GPVAE should be recorded as unable to condition")?;
    ensure(
        g.share_below_cutoff < 0.1,
        format!("GPVAE puts {:.1}% of starts below the cutoff", 100.0 * g.share_below_cutoff),
    )?;
    Ok(format!(
        "{}; GPVAE starts below 20 °C: {:.1}%",
        notes.join("; "),
        100.0 * g.share_below_cutoff
    ))
}

// 9 ─ determinism of every command

fn snapshot(dir: &Path, commands: &[&str]) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for c in commands {
        let m = Manifest::load(dir, c).map_err(|e| e.line())?;
        let name = Manifest::file_name(c);
        out.push((name.clone(), std::fs::read(dir.join(&name)).map_err(|e| e.to_string())?));
        for f in m.files {
            out.push((f.path.clone(), std::fs::read(dir.join(&f.path)).map_err(|e| e.to_string())?));
        }
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("config.json");
    let out = dir.path().join("out");
    let doc = json!({
        "data": {"surrogate": {"heating_n": 8, "cooling_n": 7}},
        "model": {"encoder_hidden": [8], "decoder_hidden": [8]},
        "train": {"epochs": 40},
        "generate": {"conditions": [{"t0": 18.0, "ts": 25.0}], "n_per_condition": 4},
        "eval": {"runs": 2},
        "experiment": {"seeds": 2, "ood_samples": 10},
        "output_dir": out,
    });
    std::fs::write(&cfg_path, doc.to_string()).map_err(|e| e.to_string())?;
    let commands: [(&str, &[&str]); 6] = [
        ("synth", &["synth"]),
        ("train", &["train"]),
        ("generate", &["generate"]),
        ("evaluate", &["evaluate"]),
        ("experiment", &["experiment", "--case", "in_dist"]),
        ("experiment", &["experiment", "--case", "out_dist", "--workers", "2"]),
    ];
    let mut files = 0;
    for (name, args) in commands {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let o = std::process::Command::new(env!("CARGO_BIN_EXE_pigpvae"))
                .args(args)
                .arg("--config")
                .arg(&cfg_path)
                .output()
                .map_err(|e| e.to_string())?;
            ensure(o.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))?;
            runs.push(snapshot(&out, &[name])?);
        }
        ensure(runs[0] == runs[1], format!("{args:?} outputs differ between runs"))?;
        files += runs[0].len();
    }
    Ok(format!("6 commands run twice, {files} files byte-identical (checkpoints, reports, CSVs, manifests)"))
}

// 10 ─ ablation identities

fn ablation() -> Outcome {
    let mut sc = SurrogateConfig::for_mode(Mode::Cooling, 5, 8);
    sc.len = 8;
    let b = synthesize_surrogate(&sc).map_err(|e| e.to_string())?;
    let small = |kind, latent, alpha: f64| ModelConfig {
        latent_dims: latent,
        encoder_hidden: vec![6],
        decoder_hidden: vec![5],
        alpha: AlphaConfig { value: alpha, ..AlphaConfig::default() },
        ..ModelConfig::for_kind(kind)
    };
    let mut worst: f64 = 0.0;
    for alpha in [1.0, 0.0] {
        let pi = ModelState::init(&small(ModelKind::Pivae, 0, alpha), &b, 3).map_err(|e| e.to_string())?;
        let pig = ModelState::init(&small(ModelKind::Pigpvae, 0, alpha), &b, 3).map_err(|e| e.to_string())?;
        for seed in 0..10 {
            let a = pivae_elbo(&pi, &b, seed).map_err(|e| e.to_string())?;
            let c = pigpvae_loss(&pig, &b, seed).map_err(|e| e.to_string())?;
            let gaps = [
                (c.total - (a.total - c.reg)).abs(),
                (c.recon - a.recon).abs(),
                (c.kl_phys - a.kl_phys).abs(),
                c.gp_entropy_term.abs(),
                c.log_z.abs(),
            ];
            worst = gaps.iter().copied().fold(worst, f64::max);
            if alpha == 0.0 {
                ensure(c.reg == 0.0 && (c.total - a.total).abs() <= 1e-10, "α = 0 totals differ")?;
            }
        }
    }
    ensure(worst <= 1e-10, format!("term gap {worst:.2e}"))?;

    // trained side by side under one seed, then sampled under one seed
    let tc = TrainConfig { epochs: 30, seed: 4, ..TrainConfig::default() };
    let pi = train(&small(ModelKind::Pivae, 0, 0.0), &b, &tc).map_err(|e| e.to_string())?.state;
    let pig = train(&small(ModelKind::Pigpvae, 0, 0.0), &b, &tc).map_err(|e| e.to_string())?.state;
    let conds = [Condition { t0: 26.0, ts: 19.0 }, Condition { t0: 17.0, ts: 12.0 }];
    let (ga, gc) = (generate(&pi, &conds, 5, 77).unwrap(), generate(&pig, &conds, 5, 77).unwrap());
    ensure(ga.batch == gc.batch, "generation differs")?;
    let bitwise = ga.batch.values().iter().flatten().zip(gc.batch.values().iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
    ensure(bitwise, "generation differs bitwise")?;

    // a zeroed discrepancy net on an enabled branch also generates like pivae
    let mut zeroed = ModelState::init(&small(ModelKind::Pigpvae, 1, 1.0), &b, 3).map_err(|e| e.to_string())?;
    let (w, bias) = zeroed.delta_decoder.as_mut().unwrap().last_layer_mut();
    w.fill(0.0);
    bias.fill(0.0);
    zeroed.trained = true;
    let mut pi0 = ModelState::init(&small(ModelKind::Pivae, 0, 1.0), &b, 3).map_err(|e| e.to_string())?;
    pi0.trained = true;
    ensure(
        generate(&zeroed, &conds, 5, 78).unwrap().batch == generate(&pi0, &conds, 5, 78).unwrap().batch,
        "zeroed discrepancy net changes generation",
    )?;
    Ok(format!("term gap {worst:.1e} over 20 evaluations; generation identical after 30 shared epochs"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradients),
        ("GP oracle", gp_oracle),
        ("KL oracles", kl_oracles),
        ("physics", physics),
        ("metric oracles", metric_oracles),
        ("parameter recovery", recovery),
        ("ordering reproduction", ordering),
        ("out-of-distribution generation", out_of_distribution),
        ("determinism", determinism),
        ("ablation identities", ablation),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let line = match &outcome {
            Ok(detail) => format!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => format!("criterion {:>2} {name}: FAIL ({why})", i + 1),
        };
        // bypass the test harness's capture so the gate is always visible
        let _ = writeln!(std::io::stderr(), "{line}");
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
