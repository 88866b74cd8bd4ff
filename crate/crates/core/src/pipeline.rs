//! End-to-end commands: data generation, both training stages, the task
//! head, evaluation and the ablation bundle.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{LatentConfig, Model, ModelSpec, SequenceBatch};
use crate::metrics::{ablation_report, degradation_csv, dba_score, metrics_csv, top1, Degradation, EvalRun};
use crate::par::Exec;
use crate::params::ParamStore;
use crate::rng::{substream, Purpose};
use crate::scene::{generate_dataset, SceneConfig};
use crate::task::{self, TaskConfig};
use crate::trainer::{
    finetune_multimodal, init_from_experts, pretrain_unimodal, Checkpoint, FINETUNE_STAGE, TASK_STAGE,
};

pub const INIT_STAGE: &str = "init";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";
const DIGEST_KEY: &str = "representation-digest";
const CHUNK: usize = 16;

fn names(ds: &Dataset) -> Vec<&str> {
    ds.mask_modalities.iter().map(String::as_str).collect()
}

pub fn build_model(scene: &SceneConfig, latent: &LatentConfig, names: &[&str]) -> Result<Model> {
    Model::new(ModelSpec::from_scene(scene, latent, names)?)
}

/// Identity of a dataset for cross-run comparisons.
pub fn dataset_id(ds: &Dataset) -> String {
    format!("seed{}-stream{}-E{}-T{}", ds.seed, ds.stream, ds.episodes, ds.steps)
}

pub fn gen_data(cfg: &RunConfig, scene: &SceneConfig, out: &Path, exec: Exec) -> Result<Dataset> {
    scene.validate()?;
    let ds = generate_dataset(scene, cfg.seed, exec)?;
    ds.save(out)?;
    Ok(ds)
}

fn snapshot(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Stage I for `modality`, reading only that modality's samples.
pub fn pretrain(cfg: &RunConfig, data: &Path, modality: &str, out: &Path, exec: Exec) -> Result<Checkpoint> {
    pretrain_with(cfg, &cfg.latent, data, modality, out, exec)
}

fn pretrain_with(
    cfg: &RunConfig,
    latent: &LatentConfig,
    data: &Path,
    modality: &str,
    out: &Path,
    exec: Exec,
) -> Result<Checkpoint> {
    let ds = Dataset::load(data, Some(&[modality]))?;
    let model = build_model(&cfg.scene, latent, &names(&ds))?;
    pretrain_unimodal(&model, &ds, modality, &cfg.train, cfg.seed, Some(out), snapshot(cfg), exec)
}

/// Seeded subset of `round(F * episodes)` episode indices, in ascending order.
pub fn align_subset(episodes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("align fraction must lie in (0, 1], got {fraction}")));
    }
    let k = ((fraction * episodes as f64).round() as usize).clamp(1.min(episodes), episodes);
    let mut order: Vec<usize> = (0..episodes).collect();
    order.shuffle(&mut substream(seed, Purpose::Subset, &[fraction.to_bits()]));
    let mut pick = order[..k].to_vec();
    pick.sort_unstable();
    Ok(pick)
}

fn load_experts(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    paths.iter().map(|p| Checkpoint::load(p)).collect()
}

fn model_of(ck: &Checkpoint) -> Result<Model> {
    let spec = ck
        .model
        .clone()
        .ok_or_else(|| Error::Incompatible(format!("checkpoint `{}` has no model description", ck.stage)))?;
    Model::new(spec)
}

/// Model covering every modality named by the experts, using their
/// shared latent configuration.
fn model_from_experts(experts: &[Checkpoint], ds: &Dataset) -> Result<Model> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Incompatible("no expert checkpoints".into()))?;
    let spec = first
        .model
        .clone()
        .ok_or_else(|| Error::Incompatible(format!("checkpoint `{}` has no model description", first.stage)))?;
    for m in &spec.modalities {
        if ds.modality_index(&m.name).is_none() {
            return Err(Error::Incompatible(format!("dataset lacks modality `{}`", m.name)));
        }
    }
    Model::new(spec)
}

/// Unaligned PoE of pretrained experts.
pub fn combine_experts(cfg: &RunConfig, data: &Path, inits: &[PathBuf], out: &Path) -> Result<Checkpoint> {
    let experts = load_experts(inits)?;
    let ds = Dataset::load(data, None)?;
    let model = model_from_experts(&experts, &ds)?;
    let params = init_from_experts(&model, &experts, cfg.seed)?;
    let ck = Checkpoint::new(INIT_STAGE, Some(model.spec.clone()), snapshot(cfg), params);
    ck.save(out)?;
    Ok(ck)
}

/// Stage II on a seeded fraction of the episodes.
pub fn finetune(
    cfg: &RunConfig,
    data: &Path,
    inits: &[PathBuf],
    out: &Path,
    fraction: f64,
    resume: bool,
    exec: Exec,
) -> Result<(Checkpoint, usize)> {
    let experts = load_experts(inits)?;
    let ds = Dataset::load(data, None)?;
    let model = model_from_experts(&experts, &ds)?;
    let params = init_from_experts(&model, &experts, cfg.seed)?;
    let subset = align_subset(ds.episodes, fraction, cfg.seed)?;
    let mut config = snapshot(cfg);
    config["align-fraction"] = json!(fraction);
    config["align-episodes"] = json!(subset.len());
    let ck = finetune_multimodal(&model, params, &ds, &subset, &cfg.train, cfg.seed, Some(out), resume, config, exec)?;
    Ok((ck, subset.len()))
}

/// Head inputs of every episode of `ds` under `drop`.
fn features(
    model: &Model,
    params: &ParamStore,
    ds: &Dataset,
    drop: &[String],
    window: usize,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..ds.episodes).collect();
    let batch = SequenceBatch::from_dataset(model, params, ds, &idx, drop)?;
    if batch.rows == 0 {
        return Ok(Vec::new());
    }
    model.represent(params, &batch, window, CHUNK, exec)
}

fn load_representation(path: &Path) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    if ck.stage != FINETUNE_STAGE && ck.stage != INIT_STAGE {
        return Err(Error::Incompatible(format!(
            "`{}` checkpoint is not a multimodal representation",
            ck.stage
        )));
    }
    let model = model_of(&ck)?;
    Ok((ck, model))
}

/// Trains the head on frozen representations of every episode.
pub fn train_task(cfg: &RunConfig, data: &Path, repr: &Path, out: &Path, exec: Exec) -> Result<Checkpoint> {
    let (rck, model) = load_representation(repr)?;
    let ds = Dataset::load(data, None)?;
    let window = cfg.task.window_for(model.spec.steps)?;
    let before = rck.params.digest();
    let feats = features(&model, &rck.params, &ds, &[], window, exec)?;
    let labels: Vec<usize> = (0..ds.episodes).map(|e| ds.label(e)).collect();
    let (head, history) = task::train_head(&feats, &labels, ds.beams, &cfg.task, cfg.seed, exec)?;
    if rck.params.digest() != before {
        return Err(Error::Incompatible("representation changed during head training".into()));
    }
    let config = json!({
        "task": cfg.task,
        "metrics": cfg.metrics,
        "window": window,
        "classes": ds.beams,
    });
    let mut ck = Checkpoint::new(TASK_STAGE, None, config, head);
    ck.epoch = history.len();
    ck.meta.insert(DIGEST_KEY.into(), Value::String(before));
    ck.save(out)?;
    task::write_accuracy_csv(&out.join(ACCURACY_FILE), &history)?;
    Ok(ck)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub run: EvalRun,
    pub predictions: Vec<usize>,
    pub truths: Vec<usize>,
}

/// Evaluates a representation and head with `drop` masked at inference.
pub fn evaluate(
    data: &Path,
    repr: &Path,
    head: &Path,
    drop: &[String],
    run: &str,
    thresholds: Option<[u32; 3]>,
    exec: Exec,
) -> Result<Evaluation> {
    let (rck, model) = load_representation(repr)?;
    let hck = Checkpoint::load(head)?;
    if hck.stage != TASK_STAGE {
        return Err(Error::Incompatible(format!("`{}` checkpoint is not a task head", hck.stage)));
    }
    let digest = hck.meta.get(DIGEST_KEY).and_then(Value::as_str).unwrap_or_default();
    if digest != rck.params.digest() {
        return Err(Error::Incompatible("task head was trained on a different representation".into()));
    }
    for d in drop {
        model.spec.modality_index(d)?;
    }
    let tcfg: TaskConfig = serde_json::from_value(hck.config["task"].clone())
        .map_err(|e| Error::format(head, format!("task config: {e}")))?;
    let window = hck.config["window"]
        .as_u64()
        .ok_or_else(|| Error::format(head, "missing window"))? as usize;
    let thresholds = match thresholds {
        Some(t) => t,
        None => serde_json::from_value::<crate::metrics::DbaConfig>(hck.config["metrics"].clone())
            .map_err(|e| Error::format(head, format!("metrics config: {e}")))?
            .thresholds,
    };
    let ds = Dataset::load(data, None)?;
    let classes = hck.config["classes"].as_u64().unwrap_or(ds.beams as u64) as usize;
    if classes != ds.beams {
        return Err(Error::Incompatible(format!(
            "head predicts {classes} beams, dataset has {}",
            ds.beams
        )));
    }
    let feats = features(&model, &rck.params, &ds, drop, window, exec)?;
    let preds = task::predict_beams(&hck.params, &tcfg, &feats, exec)?;
    let truths: Vec<usize> = (0..ds.episodes).map(|e| ds.label(e)).collect();
    let (dba, acc) = if preds.is_empty() {
        (
            crate::metrics::DbaScore {
                y: [0.0; 3],
                score: 0.0,
            },
            0.0,
        )
    } else {
        (
            dba_score(&preds, &truths, thresholds, classes)?,
            top1(&preds, &truths, classes)?,
        )
    };
    Ok(Evaluation {
        run: EvalRun {
            run: run.to_string(),
            drop_set: drop.to_vec(),
            dba,
            top1: acc,
            dataset: dataset_id(&ds),
        },
        predictions: preds,
        truths,
    })
}

pub fn predictions_csv(ev: &Evaluation) -> String {
    let mut s = String::from("episode,truth,pred\n");
    for (i, (t, p)) in ev.truths.iter().zip(&ev.predictions).enumerate() {
        s.push_str(&format!("{i},{t},{p}\n"));
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Results of [`reproduce_ablations`].
#[derive(Clone, Debug, Default)]
pub struct AblationSummary {
    pub unaligned: f64,
    pub aligned: f64,
    pub shared_only: f64,
    /// DBA with only the named modality observed.
    pub single: Vec<(String, f64)>,
    pub degradations: Vec<Degradation>,
    /// `(fraction, episodes, dba)`
    pub fractions: Vec<(f64, usize, f64)>,
    /// `(shared, private, dba)`
    pub ratios: Vec<(usize, usize, f64)>,
    pub reg_enc_initial: f64,
    pub reg_enc_final: f64,
    pub runs: Vec<EvalRun>,
}

struct Variant<'a> {
    cfg: RunConfig,
    dir: PathBuf,
    train: &'a Path,
    test: &'a Path,
    exec: Exec,
}

impl Variant<'_> {
    fn pretrain_all(&self, modalities: &[String]) -> Result<Vec<PathBuf>> {
        modalities
            .iter()
            .map(|m| {
                let out = self.dir.join("pretrain").join(m);
                pretrain_with(&self.cfg, &self.cfg.latent, self.train, m, &out, self.exec)?;
                Ok(out)
            })
            .collect()
    }

    fn head_and_eval(&self, repr: &Path, run: &str) -> Result<(PathBuf, Evaluation)> {
        let head = repr.join("head");
        train_task(&self.cfg, self.train, repr, &head, self.exec)?;
        let ev = evaluate(self.test, repr, &head, &[], run, None, self.exec)?;
        Ok((head, ev))
    }
}

fn fraction_label(f: f64) -> String {
    format!("f{f}")
}

/// Runs the full pipeline and writes `metrics.csv`, `table2.csv`,
/// `fig2.csv`, `fig3.csv` and `fig4.csv` under `out`.
pub fn reproduce_ablations(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<AblationSummary> {
    cfg.validate()?;
    write(&out.join("config.json"), &cfg.to_json())?;
    let train_dir = out.join("data").join("train");
    let test_dir = out.join("data").join("test");
    let mut train_scene = cfg.scene.clone();
    train_scene.stream = 0;
    let mut test_scene = cfg.scene.clone();
    test_scene.stream = 1;
    test_scene.episodes = cfg.scene.test_episodes;
    let train = gen_data(cfg, &train_scene, &train_dir, exec)?;
    gen_data(cfg, &test_scene, &test_dir, exec)?;
    let modalities = train.mask_modalities.clone();
    let mut summary = AblationSummary::default();
    let mut runs = Vec::new();

    // dual latents: pretrain, unaligned PoE and the align-fraction sweep
    let dual = Variant {
        cfg: cfg.clone(),
        dir: out.join("dual"),
        train: &train_dir,
        test: &test_dir,
        exec,
    };
    let experts = dual.pretrain_all(&modalities)?;
    let unaligned_dir = dual.dir.join("unaligned");
    combine_experts(cfg, &train_dir, &experts, &unaligned_dir)?;
    let (_, ev) = dual.head_and_eval(&unaligned_dir, "unaligned")?;
    summary.unaligned = ev.run.dba.score;
    runs.push(ev.run);

    let mut fractions: Vec<f64> = cfg.ablations.align_fractions.clone();
    if !fractions.contains(&1.0) {
        fractions.push(1.0);
    }
    let mut aligned = None;
    for &f in &fractions {
        let dir = dual.dir.join(format!("finetune-{}", fraction_label(f)));
        let (ck, count) = finetune(cfg, &train_dir, &experts, &dir, f, false, exec)?;
        let name = format!("aligned-{}", fraction_label(f));
        let (head, ev) = dual.head_and_eval(&dir, &name)?;
        if cfg.ablations.align_fractions.contains(&f) {
            summary.fractions.push((f, count, ev.run.dba.score));
        }
        if f == 1.0 {
            summary.reg_enc_initial = ck.log.first().map(|r| r.reg_enc).unwrap_or(0.0);
            summary.reg_enc_final = ck.log.last().map(|r| r.reg_enc).unwrap_or(0.0);
            aligned = Some((dir.clone(), head, ev.run.clone()));
        }
        runs.push(ev.run);
    }
    let (aligned_dir, aligned_head, aligned_run) = aligned.expect("fraction 1.0 is always run");
    summary.aligned = aligned_run.dba.score;

    // missing modalities at inference
    let mut dropped = Vec::new();
    for drop in &cfg.ablations.drop_sets {
        let ev = evaluate(&test_dir, &aligned_dir, &aligned_head, drop, "aligned-f1", None, exec)?;
        dropped.push(ev.run.clone());
        runs.push(ev.run);
    }
    for m in &modalities {
        let drop: Vec<String> = modalities.iter().filter(|x| *x != m).cloned().collect();
        let ev = evaluate(&test_dir, &aligned_dir, &aligned_head, &drop, &format!("only-{m}"), None, exec)?;
        summary.single.push((m.clone(), ev.run.dba.score));
        runs.push(ev.run);
    }
    if !dropped.is_empty() {
        summary.degradations = ablation_report(&aligned_run, &dropped)?;
    }

    // shared latent only
    let mut shared_cfg = cfg.clone();
    shared_cfg.latent.private = false;
    let shared = Variant {
        cfg: shared_cfg.clone(),
        dir: out.join("shared-only"),
        train: &train_dir,
        test: &test_dir,
        exec,
    };
    let shared_experts = shared.pretrain_all(&modalities)?;
    let dir = shared.dir.join("finetune-f1");
    finetune(&shared_cfg, &train_dir, &shared_experts, &dir, 1.0, false, exec)?;
    let (_, ev) = shared.head_and_eval(&dir, "shared-only")?;
    summary.shared_only = ev.run.dba.score;
    runs.push(ev.run);

    // shared/private split with a fixed total
    summary
        .ratios
        .push((cfg.latent.shared_dim, cfg.latent.private_dim, summary.aligned));
    for &[ds, dp] in &cfg.ablations.ratio_sweep {
        let mut rcfg = cfg.clone();
        rcfg.latent.shared_dim = ds;
        rcfg.latent.private_dim = dp;
        rcfg.latent.private = dp > 0;
        let v = Variant {
            cfg: rcfg.clone(),
            dir: out.join(format!("split-{ds}-{dp}")),
            train: &train_dir,
            test: &test_dir,
            exec,
        };
        let ex = v.pretrain_all(&modalities)?;
        let dir = v.dir.join("finetune-f1");
        finetune(&rcfg, &train_dir, &ex, &dir, 1.0, false, exec)?;
        let (_, ev) = v.head_and_eval(&dir, &format!("split-{ds}-{dp}"))?;
        summary.ratios.push((ds, dp, ev.run.dba.score));
        runs.push(ev.run);
    }

    write(&out.join(METRICS_FILE), &metrics_csv(&runs))?;
    write(&out.join("table2.csv"), &degradation_csv(&summary.degradations))?;
    let mut fig2 = String::from("config,dba\n");
    for (name, v) in [
        ("unaligned-poe", summary.unaligned),
        ("aligned", summary.aligned),
        ("shared-only", summary.shared_only),
    ] {
        fig2.push_str(&format!("{name},{v:.6}\n"));
    }
    for (m, v) in &summary.single {
        fig2.push_str(&format!("only-{m},{v:.6}\n"));
    }
    write(&out.join("fig2.csv"), &fig2)?;
    let mut fig3 = String::from("align_fraction,episodes,dba\n");
    for (f, n, v) in &summary.fractions {
        fig3.push_str(&format!("{f},{n},{v:.6}\n"));
    }
    write(&out.join("fig3.csv"), &fig3)?;
    let mut fig4 = String::from("shared_dim,private_dim,dba\n");
    for (s, p, v) in &summary.ratios {
        fig4.push_str(&format!("{s},{p},{v:.6}\n"));
    }
    write(&out.join("fig4.csv"), &fig4)?;
    summary.runs = runs;
    Ok(summary)
}
