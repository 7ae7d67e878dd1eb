use std::f64::consts::PI;

use pigpvae::data::*;
use pigpvae::models::*;
use pigpvae::nets::tape::softplus;
use pigpvae::nets::{Mat, SD_FLOOR};
use pigpvae::rng;
use pigpvae::training::{train, TrainConfig};

fn tiny_batch() -> SeriesBatch {
    let mut cfg = SurrogateConfig::for_mode(Mode::Heating, 2, 3);
    cfg.len = 3;
    synthesize_surrogate(&cfg).unwrap()
}

fn normal_logpdf(x: f64, m: f64, s: f64) -> f64 {
    -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln()
}

#[test]
fn vae_elbo_matches_monte_carlo_oracle() {
    let batch = tiny_batch();
    let cfg = ModelConfig {
        latent_dims: 1,
        encoder_hidden: vec![3],
        decoder_hidden: vec![3],
        obs_sd: 0.5,
        ..ModelConfig::for_kind(ModelKind::Vae)
    };
    let state = ModelState::init(&cfg, &batch, 8).unwrap();

    // library: one-sample estimates over 10⁴ seeds
    let reps = 10_000;
    let est: Vec<f64> = (0..reps).map(|s| vae_elbo(&state, &batch, s).unwrap().total).collect();
    let mean = est.iter().sum::<f64>() / reps as f64;
    let var = est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);

    // oracle: E_q[log p(x|z) + log p(z) − log q(z)] with 10⁶ draws, using
    // plain forward passes only
    let x = Mat::from_fn(batch.len(), 3, |i, j| state.normalizer.apply(batch.values()[i][j]));
    let enc = state.encoder.as_ref().unwrap().forward(&x).unwrap();
    let dec = state.decoder.as_ref().unwrap();
    let sigma = state.obs_sd();
    let draws = 1_000_000;
    let mut r = rng::seeded(99, 400);
    let eps = rng::normals(&mut r, draws * batch.len());
    let mut z = Mat::zeros(draws * batch.len(), 1);
    for i in 0..batch.len() {
        let (m, s) = (enc[(i, 0)], softplus(enc[(i, 1)]) + SD_FLOOR);
        for d in 0..draws {
            z[(i * draws + d, 0)] = m + s * eps[i * draws + d];
        }
    }
    let x_hat = dec.forward(&z).unwrap();
    let mut vals = vec![0.0; draws];
    for i in 0..batch.len() {
        let (m, s) = (enc[(i, 0)], softplus(enc[(i, 1)]) + SD_FLOOR);
        for (d, val) in vals.iter_mut().enumerate() {
            let row = i * draws + d;
            let zi = z[(row, 0)];
            let mut v = normal_logpdf(zi, 0.0, 1.0) - normal_logpdf(zi, m, s);
            for t in 0..3 {
                v += normal_logpdf(x[(i, t)], x_hat[(row, t)], sigma);
            }
            *val += v;
        }
    }
    let oracle = vals.iter().sum::<f64>() / draws as f64;
    let ovar = vals.iter().map(|v| (v - oracle).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
    let se = (var / reps as f64 + ovar / draws as f64).sqrt();
    assert!((mean - oracle).abs() < 3.0 * se, "library {mean}, oracle {oracle}, se {se}");
}

/// Physics posterior pinned to the prior (zero KL) and α = 0: the pigpvae
/// GP branch reproduces a gpvae sharing its encoder and kernel term for
/// term, and the total differs only through the decoder.
#[test]
fn pinned_physics_branch_shares_gpvae_terms() {
    let mut cfg = SurrogateConfig::for_mode(Mode::Cooling, 4, 6);
    cfg.len = 6;
    let batch = synthesize_surrogate(&cfg).unwrap();
    let base = ModelConfig {
        latent_dims: 1,
        encoder_hidden: vec![5],
        decoder_hidden: vec![4],
        ..ModelConfig::default()
    };
    let mut p = ModelState::init(
        &ModelConfig {
            kind: ModelKind::Pigpvae,
            alpha: AlphaConfig { value: 0.0, ..AlphaConfig::default() },
            ..base.clone()
        },
        &batch,
        2,
    )
    .unwrap();
    let prior = p.prior;
    let (w, b) = p.phys_encoder.as_mut().unwrap().last_layer_mut();
    w.fill(0.0);
    b[0] = prior.mean;
    b[1] = pigpvae::nets::tape::softplus_inv(prior.sd - SD_FLOOR);

    let mut g = ModelState::init(&ModelConfig { kind: ModelKind::Gpvae, ..base }, &batch, 2).unwrap();
    g.encoder = p.encoder.clone();
    g.kernels = p.kernels.clone();
    g.normalizer = p.normalizer.clone();

    for seed in 0..5 {
        let a = pigpvae_loss(&p, &batch, seed).unwrap();
        let c = gpvae_elbo(&g, &batch, seed).unwrap();
        assert!(a.kl_phys.abs() <= 1e-10);
        assert_eq!(a.reg, 0.0);
        assert_eq!(a.gp_entropy_term, c.gp_entropy_term);
        assert_eq!(a.log_z, c.log_z);
        assert!((a.total - (a.recon - c.gp_entropy_term + c.log_z)).abs() <= 1e-10);
    }
}

#[test]
fn reconstruction_after_training_is_close() {
    let data = synthesize_surrogate(&SurrogateConfig::for_mode(Mode::Heating, 29, 42)).unwrap();
    let (train_b, _) = split(&data, &SplitSpec { train_fraction: 0.7, seed: 0, ood_cutoff: None }).unwrap();
    let trace = train(&ModelConfig::for_kind(ModelKind::Pigpvae), &train_b, &TrainConfig::default()).unwrap();
    let rec = reconstruct(&trace.state, &train_b).unwrap();
    let mut sq = 0.0;
    let mut count = 0.0;
    for (row, fit) in train_b.values().iter().zip(&rec.x_hat) {
        for (a, b) in row.iter().zip(fit) {
            sq += (a - b).powi(2);
            count += 1.0;
        }
    }
    let rmse = (sq / count).sqrt();
    assert!(rmse < 0.5, "RMSE {rmse} °C");
    assert_eq!(reconstruct(&trace.state, &train_b).unwrap().x_hat, rec.x_hat);
    let phys = rec.x_phy.unwrap();
    assert!(phys.iter().zip(train_b.t0s()).all(|(r, t0)| (r[0] - t0).abs() < 1e-9));
}
