// Shared builders and closed-form oracles for the integration tests.
#![allow(dead_code)]

use vibeam_autodiff::Tensor;
use vibeam_core::fusion::{
    LatentConfig, Model, ModalityKind, ModalitySpec, ModelSpec, NoiseMode, ObjectiveConfig, SequenceBatch,
};
use vibeam_core::frontend::WindowKind;
use vibeam_core::params::ParamStore;
use vibeam_core::prob::{softplus_inverse_of_one, LOG_VAR_MAX, LOG_VAR_MIN};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Single vector modality `m` observed for `steps` steps.
pub fn single_modality_model(dim: usize, steps: usize, latent: LatentConfig) -> Model {
    let spec = ModelSpec {
        latent,
        steps,
        modalities: vec![ModalitySpec {
            name: "m".into(),
            dim,
            kind: ModalityKind::Vector,
        }],
    };
    Model::new(spec).unwrap()
}

pub fn small_latent(private: bool) -> LatentConfig {
    LatentConfig {
        shared_dim: 3,
        private_dim: 2,
        state_dim: 4,
        hidden: vec![5, 6],
        private,
        radar_padded_chirps: 8,
        window: WindowKind::Hamming,
    }
}

/// Batch with every modality present at every step; `x[m]` is `[rows, steps, dim]`.
pub fn dense_batch(model: &Model, x: Vec<Vec<f64>>, episodes: Vec<u64>) -> SequenceBatch {
    let rows = episodes.len();
    let steps = model.spec.steps;
    SequenceBatch {
        rows,
        steps,
        episodes,
        present: vec![vec![true; rows * steps]; x.len()],
        x: x.into_iter().map(Some).collect(),
        labels: vec![0; rows],
    }
}

pub fn zero_lambdas(chunk_size: usize) -> ObjectiveConfig {
    ObjectiveConfig {
        lambda_enc: 0.0,
        lambda_dec: 0.0,
        lambda_u: 0.0,
        include_task: false,
        chunk_size,
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn clamp_lv(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// Plain-loop MLP: `x W + b` per layer, GELU between layers.
pub fn mlp_eval(params: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut k = 0;
    while let Some(w) = params.get(&format!("{prefix}.l{k}.w")) {
        let b = params.get(&format!("{prefix}.l{k}.b")).unwrap().data();
        let (fi, fo) = (w.shape()[0], w.shape()[1]);
        assert_eq!(fi, h.len(), "{prefix}.l{k}");
        let mut out = b.to_vec();
        for i in 0..fi {
            for j in 0..fo {
                out[j] += h[i] * w.data()[i * fo + j];
            }
        }
        k += 1;
        let last = params.get(&format!("{prefix}.l{k}.w")).is_none();
        h = if last { out } else { out.into_iter().map(gelu).collect() };
    }
    h
}

/// `(mean, log_var)` from a `[2d]` network output.
fn split(out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = out.len() / 2;
    (out[..d].to_vec(), out[d..].iter().map(|&v| clamp_lv(v)).collect())
}

fn kl_diag(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| {
            let d = mq[i] - mp[i];
            0.5 * (lp[i] - lq[i] + (lq[i].exp() + d * d) / lp[i].exp() - 1.0)
        })
        .sum()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Reparameterized single-sample ELBO of a one-step, one-modality model
/// written as an ordinary VAE: the posterior over the shared latent is
/// the prior-weighted product with the encoder, and the optional private
/// latent has its own prior network. `noise` is `[shared, private]`.
pub fn vae_oracle(params: &ParamStore, latent: &LatentConfig, x: &[f64], noise: &[f64]) -> f64 {
    let (ds, dp, dh) = (latent.shared_dim, latent.private_dim, latent.state_dim);
    let h0 = vec![0.0; dh];
    let mut enc_in = x.to_vec();
    enc_in.extend_from_slice(&h0);

    let (m0, l0) = split(&mlp_eval(params, "shared_prior", &h0));
    let (me, le) = split(&mlp_eval(params, "m.enc_shared", &enc_in));
    let alpha = softplus(params.get("poe.alpha_raw").unwrap().data()[0]);
    let mut mf = vec![0.0; ds];
    let mut lf = vec![0.0; ds];
    for i in 0..ds {
        let p0 = (-l0[i]).exp();
        let pe = alpha * (-le[i]).exp();
        mf[i] = (p0 * m0[i] + pe * me[i]) / (p0 + pe);
        lf[i] = clamp_lv(-(p0 + pe).ln());
    }
    let mut dec_in: Vec<f64> = (0..ds).map(|i| mf[i] + (0.5 * lf[i]).exp() * noise[i]).collect();
    let mut kl = kl_diag(&mf, &lf, &m0, &l0);
    if latent.private {
        let (mq, lq) = split(&mlp_eval(params, "m.enc_private", &enc_in));
        let (mp, lp) = split(&mlp_eval(params, "m.prior_private", &h0));
        dec_in.extend((0..dp).map(|i| mq[i] + (0.5 * lq[i]).exp() * noise[ds + i]));
        kl += kl_diag(&mq, &lq, &mp, &lp);
    }
    dec_in.extend_from_slice(&h0);
    let xhat = mlp_eval(params, "m.dec", &dec_in);
    let lv = clamp_lv(params.get("m.log_var").unwrap().item());
    let ll: f64 = x
        .iter()
        .zip(&xhat)
        .map(|(a, b)| -0.5 * (LN_2PI + lv + (a - b).powi(2) * (-lv).exp()))
        .sum();
    ll - kl
}

/// One-dimensional linear-Gaussian model
/// `z ~ N(mu0, v0)`, `x | z ~ N(w z + c, s2)`,
/// encoded in the sequential model with linear networks.
#[derive(Clone, Copy, Debug)]
pub struct LinearToy {
    pub mu0: f64,
    pub v0: f64,
    pub w: f64,
    pub c: f64,
    pub s2: f64,
}

impl LinearToy {
    pub fn model() -> Model {
        let latent = LatentConfig {
            shared_dim: 1,
            private_dim: 1,
            state_dim: 1,
            hidden: vec![],
            private: false,
            radar_padded_chirps: 8,
            window: WindowKind::Hamming,
        };
        single_modality_model(1, 1, latent)
    }

    /// Model parameters with encoder `mean = a x + b`, `log_var = lv`.
    pub fn params(&self, model: &Model, enc: [f64; 3]) -> ParamStore {
        let mut p = model.init_params(0);
        let set = |p: &mut ParamStore, name: &str, shape: Vec<usize>, v: Vec<f64>| {
            p.insert(name, Tensor::new(shape, v).unwrap());
        };
        set(&mut p, "shared_prior.l0.w", vec![1, 2], vec![0.3, -0.2]);
        set(&mut p, "shared_prior.l0.b", vec![2], vec![self.mu0, self.v0.ln()]);
        set(&mut p, "m.dec.l0.w", vec![2, 1], vec![self.w, 0.4]);
        set(&mut p, "m.dec.l0.b", vec![1], vec![self.c]);
        set(&mut p, "m.log_var", vec![], vec![self.s2.ln()]);
        set(&mut p, "m.enc_shared.l0.w", vec![2, 2], vec![enc[0], 0.0, 0.7, -0.1]);
        set(&mut p, "m.enc_shared.l0.b", vec![2], vec![enc[1], enc[2]]);
        set(&mut p, "poe.alpha_raw", vec![1], vec![softplus_inverse_of_one()]);
        p
    }

    /// Encoder that makes the fused posterior exact.
    pub fn exact_encoder(&self) -> [f64; 3] {
        [1.0 / self.w, -self.c / self.w, (self.s2 / (self.w * self.w)).ln()]
    }

    pub fn log_evidence(&self, x: f64) -> f64 {
        let mean = self.w * self.mu0 + self.c;
        let var = self.w * self.w * self.v0 + self.s2;
        -0.5 * (LN_2PI + var.ln() + (x - mean).powi(2) / var)
    }
}

/// The reconstruction term is quadratic in the latent noise, so the
/// average over `eps = +1` and `eps = -1` is the exact expectation.
pub fn exact_elbo(model: &Model, params: &ParamStore, x: f64) -> f64 {
    let batch = dense_batch(model, vec![vec![x]], vec![0]);
    let up = model.elbo_sequence(params, &batch, NoiseMode::Constant(1.0)).unwrap();
    let down = model.elbo_sequence(params, &batch, NoiseMode::Constant(-1.0)).unwrap();
    0.5 * (up.elbo + down.elbo)
}

/// A full pipeline config small enough to run in seconds.
pub fn tiny_run_config() -> vibeam_core::config::RunConfig {
    let mut cfg = vibeam_core::config::RunConfig::default();
    cfg.seed = 3;
    cfg.scene.episodes = 48;
    cfg.scene.test_episodes = 24;
    cfg.latent.shared_dim = 4;
    cfg.latent.private_dim = 2;
    cfg.latent.state_dim = 6;
    cfg.latent.hidden = vec![8];
    cfg.train.pretrain_epochs = 2;
    cfg.train.finetune_epochs = 2;
    cfg.train.batch_size = 16;
    cfg.task.hidden = vec![8];
    cfg.task.epochs = 3;
    cfg.ablations.align_fractions = vec![0.5, 1.0];
    cfg.ablations.ratio_sweep = vec![[2, 4]];
    cfg
}

/// Adam on the encoder only, averaging the gradients at noise +1 and -1
/// so the objective is the exact ELBO of the linear toy.
pub fn fit_linear_encoder(model: &Model, params: &mut ParamStore, xs: &[f64]) {
    use vibeam_core::par::Exec;
    use vibeam_core::trainer::{optimizer_step, OptimState, OptimizerConfig};
    let batch = dense_batch(model, vec![xs.to_vec()], (0..xs.len() as u64).collect());
    let enc = |n: &str| n.starts_with("m.enc_shared");
    let cfg = zero_lambdas(16);
    let mut state = OptimState::default();
    let opt = OptimizerConfig::default();
    for step in 0..3000 {
        let lr = if step < 2000 { 0.02 } else { 0.002 };
        let (_, up) = model.objective(params, &batch, NoiseMode::Constant(1.0), &cfg, &enc, Exec::Sequential).unwrap();
        let (_, down) = model.objective(params, &batch, NoiseMode::Constant(-1.0), &cfg, &enc, Exec::Sequential).unwrap();
        let grads = up
            .into_iter()
            .zip(down)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(u, d)| 0.5 * (u + d)).collect()),
                _ => None,
            })
            .collect();
        optimizer_step(params, &grads, &mut state, lr, &opt).unwrap();
    }
}
