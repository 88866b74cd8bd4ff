mod support;

use serde_json::Value;
use support::*;
use vibeam_core::fusion::{LatentConfig, Model, ModalityKind, ModalitySpec, ModelSpec, SequenceBatch};
use vibeam_core::frontend::WindowKind;
use vibeam_core::par::Exec;
use vibeam_core::params::ParamStore;
use vibeam_core::rng::{normals, substream, Purpose};
use vibeam_core::trainer::{
    init_from_experts, owned_by_pretrain, pretrain_stage, train_stage, Checkpoint, StageRun, TrainConfig,
};
use vibeam_core::Error;

fn two_modalities(steps: usize) -> Model {
    let latent = LatentConfig {
        shared_dim: 2,
        private_dim: 2,
        state_dim: 3,
        hidden: vec![6],
        private: true,
        radar_padded_chirps: 8,
        window: WindowKind::Hamming,
    };
    let spec = ModelSpec {
        latent,
        steps,
        modalities: vec![
            ModalitySpec {
                name: "a".into(),
                dim: 3,
                kind: ModalityKind::Vector,
            },
            ModalitySpec {
                name: "b".into(),
                dim: 2,
                kind: ModalityKind::Vector,
            },
        ],
    };
    Model::new(spec).unwrap()
}

fn random_batch(model: &Model, rows: usize, seed: u64) -> SequenceBatch {
    let mut rng = substream(seed, Purpose::Data, &[]);
    let x = model
        .spec
        .modalities
        .iter()
        .map(|m| normals(&mut rng, rows * model.spec.steps * m.dim))
        .collect();
    dense_batch(model, x, (0..rows as u64).collect())
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        finetune_epochs: epochs,
        chunk_size: 4,
        ..TrainConfig::default()
    }
}

fn run<'a>(epochs: usize, trainable: &'a (dyn Fn(&str) -> bool + Sync), out: Option<&'a std::path::Path>, resume: bool) -> StageRun<'a> {
    let c = cfg(epochs);
    StageRun {
        stage: "finetune".into(),
        epochs,
        objective: vibeam_core::fusion::ObjectiveConfig {
            lambda_enc: c.lambda_enc,
            lambda_dec: c.lambda_dec,
            lambda_u: c.lambda_u,
            include_task: false,
            chunk_size: c.chunk_size,
        },
        trainable,
        out,
        resume,
        config: Value::Null,
    }
}

fn all(_: &str) -> bool {
    true
}

fn start(model: &Model, seed: u64) -> Checkpoint {
    Checkpoint::new("finetune", Some(model.spec.clone()), Value::Null, model.init_params(seed))
}

#[test]
fn zero_epochs_return_the_initialization() {
    let model = two_modalities(2);
    let data = random_batch(&model, 10, 1);
    let ck = train_stage(&model, start(&model, 4), &data, &cfg(0), 4, &run(0, &all, None, false), Exec::Sequential).unwrap();
    assert_eq!(ck.params, model.init_params(4));
    assert_eq!(ck.log.len(), 1);
    assert_eq!(ck.log[0].epoch, 0);
}

#[test]
fn same_seed_same_checkpoint_and_log() {
    let model = two_modalities(2);
    let data = random_batch(&model, 20, 2);
    let a = train_stage(&model, start(&model, 1), &data, &cfg(3), 9, &run(3, &all, None, false), Exec::Parallel).unwrap();
    let b = train_stage(&model, start(&model, 1), &data, &cfg(3), 9, &run(3, &all, None, false), Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.log.len(), 4);
    assert_ne!(a.params, model.init_params(1));
}

#[test]
fn zero_lambdas_train_the_plain_elbo() {
    let model = two_modalities(2);
    let data = random_batch(&model, 12, 3);
    let mut r = run(2, &all, None, false);
    r.objective.lambda_enc = 0.0;
    r.objective.lambda_dec = 0.0;
    r.objective.lambda_u = 0.0;
    let ck = train_stage(&model, start(&model, 2), &data, &cfg(2), 1, &r, Exec::Sequential).unwrap();
    for row in &ck.log {
        assert_eq!(row.objective, -row.elbo);
    }
}

#[test]
fn hidden_modality_parameters_do_not_move() {
    let model = two_modalities(2);
    let mut data = random_batch(&model, 16, 4);
    data.present[1].iter_mut().for_each(|p| *p = false);
    let init = model.init_params(5);
    let ck = train_stage(&model, start(&model, 5), &data, &cfg(2), 3, &run(2, &all, None, false), Exec::Sequential).unwrap();
    for (name, t) in ck.params.iter() {
        if name.starts_with("b.") {
            assert_eq!(t, init.get(name).unwrap(), "{name}");
        }
    }
    assert_ne!(ck.params.get("a.dec.l0.w"), init.get("a.dec.l0.w"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let model = two_modalities(2);
    let data = random_batch(&model, 20, 5);
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let part_dir = dir.path().join("part");
    let full = train_stage(&model, start(&model, 6), &data, &cfg(4), 2, &run(4, &all, Some(&full_dir), false), Exec::Sequential).unwrap();
    train_stage(&model, start(&model, 6), &data, &cfg(2), 2, &run(2, &all, Some(&part_dir), false), Exec::Sequential).unwrap();
    let resumed = train_stage(&model, start(&model, 6), &data, &cfg(4), 2, &run(4, &all, Some(&part_dir), true), Exec::Sequential).unwrap();
    assert_eq!(resumed, full);
    let a = std::fs::read(full_dir.join("params.bin")).unwrap();
    let b = std::fs::read(part_dir.join("params.bin")).unwrap();
    assert_eq!(a, b);
    assert_eq!(Checkpoint::load(&full_dir).unwrap(), full);
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let model = two_modalities(1);
    let data = random_batch(&model, 8, 6);
    let mut c = cfg(2);
    // the first Adam step moves every weight by ~1e200; the next batch overflows
    c.learning_rate = 1e200;
    c.batch_size = 4;
    let dir = tempfile::tempdir().unwrap();
    let err = train_stage(&model, start(&model, 7), &data, &c, 1, &run(2, &all, Some(dir.path()), false), Exec::Sequential)
        .unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    let saved = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(saved.epoch, 0);
    assert_eq!(saved.params, model.init_params(7));
}

fn expert(model: &Model, m: &str, seed: u64) -> Checkpoint {
    let params = model.init_params(seed).filter(|n| owned_by_pretrain(m, n));
    Checkpoint::new(pretrain_stage(m), Some(model.spec.clone()), Value::Null, params)
}

#[test]
fn expert_initialization_copies_and_averages() {
    let model = two_modalities(2);
    let mut ea = expert(&model, "a", 1);
    let mut eb = expert(&model, "b", 2);
    let name = "transition.gate.b";
    let n = ea.params.get(name).unwrap().numel();
    ea.params.insert(name, vibeam_autodiff::Tensor::zeros(vec![n]));
    eb.params.insert(name, vibeam_autodiff::Tensor::full(vec![n], 2.0));
    let p = init_from_experts(&model, &[ea.clone(), eb.clone()], 0).unwrap();
    assert!(p.get(name).unwrap().data().iter().all(|&v| v == 1.0));
    assert_eq!(p.get("a.dec.l0.w"), ea.params.get("a.dec.l0.w"));
    assert_eq!(p.get("b.enc_shared.l1.w"), eb.params.get("b.enc_shared.l1.w"));
    let swapped = init_from_experts(&model, &[eb.clone(), ea.clone()], 0).unwrap();
    assert_eq!(p, swapped);
    // identical shared entries stay as they are
    let same_a = expert(&model, "a", 3);
    let mut same_b = expert(&model, "b", 4);
    for (k, t) in same_a.params.iter().filter(|(k, _)| k.starts_with("shared_prior.") || k.starts_with("transition.")) {
        same_b.params.insert(k, t.clone());
    }
    let q = init_from_experts(&model, &[same_a.clone(), same_b], 0).unwrap();
    for (k, t) in same_a.params.iter().filter(|(k, _)| k.starts_with("shared_prior.")) {
        assert_eq!(q.get(k).unwrap(), t);
    }
    assert!(matches!(init_from_experts(&model, &[ea.clone(), ea], 0), Err(Error::Incompatible(_))));
}

#[test]
fn linear_gaussian_training_reaches_the_evidence_optimum() {
    let model = LinearToy::model();
    let truth = LinearToy { mu0: 0.5, v0: 1.0, w: 1.2, c: -0.3, s2: 0.4 };
    let n = 256;
    let xs: Vec<f64> = normals(&mut substream(8, Purpose::Data, &[]), n)
        .into_iter()
        .map(|e| truth.w * truth.mu0 + truth.c + e * (truth.w * truth.w * truth.v0 + truth.s2).sqrt())
        .collect();
    let data = dense_batch(&model, vec![xs.clone()], (0..n as u64).collect());
    let init = LinearToy { mu0: 0.0, v0: 1.0, w: 0.5, c: 0.0, s2: 1.0 };
    let params = init.params(&model, [0.3, 0.0, 0.0]);
    let mut c = cfg(400);
    c.batch_size = 64;
    let mut r = run(400, &all, None, false);
    r.objective.lambda_enc = 0.0;
    r.objective.lambda_dec = 0.0;
    r.objective.lambda_u = 0.0;
    let ck = train_stage(&model, Checkpoint::new("finetune", None, Value::Null, params), &data, &c, 5, &r, Exec::Sequential).unwrap();
    let learned = toy_from(&ck.params);
    // the model family is N(m, s) for the marginal, so the optimum is the Gaussian fit
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let best = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + 1.0);
    let got = xs.iter().map(|&x| learned.log_evidence(x)).sum::<f64>() / n as f64;
    assert!(best - got <= 1e-2 && got <= best + 1e-12, "{got} vs {best}");
}

fn toy_from(p: &ParamStore) -> LinearToy {
    let prior = p.get("shared_prior.l0.b").unwrap().data();
    LinearToy {
        mu0: prior[0],
        v0: prior[1].exp(),
        w: p.get("m.dec.l0.w").unwrap().data()[0],
        c: p.get("m.dec.l0.b").unwrap().data()[0],
        s2: p.get("m.log_var").unwrap().item().exp(),
    }
}
