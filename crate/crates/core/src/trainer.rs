//! Optimizer, checkpoints and the two training stages.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vibeam_autodiff::Tensor;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{Grads, Model, ModelSpec, NoiseMode, ObjectiveConfig, ObjectiveReport, SequenceBatch};
use crate::par::Exec;
use crate::params::{is_buffer, ParamStore};
use crate::rng::{substream, Purpose};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,stage,elbo,reg_enc,reg_dec,unitarity,objective";
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap.
    pub clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 5.0,
        }
    }
}

/// Moment estimates keyed by parameter-store index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
}

/// One clipped update. Entries without a gradient are left untouched.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut OptimState,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if g.len() != params.tensor(i).numel() {
            return Err(Error::Dimension(format!("gradient size of `{}`", params.name(i))));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`", params.name(i))));
        }
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    let scale = if norm > cfg.clip { cfg.clip / norm } else { 1.0 };
    state.step += 1;
    state.m.resize(params.len(), None);
    state.v.resize(params.len(), None);
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params.tensor_mut(i).data_mut();
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (w, gv) in p.iter_mut().zip(g) {
                    *w -= lr * scale * gv;
                }
            }
            OptimizerKind::Adam => {
                let m = state.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
                let v = state.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
                for k in 0..g.len() {
                    let gv = scale * g[k];
                    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gv;
                    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gv * gv;
                    p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lambda_enc: f64,
    pub lambda_dec: f64,
    pub lambda_u: f64,
    /// Learning-rate multiplier of the fusion reliability weights.
    pub alpha_lr_scale: f64,
    pub include_task_pretrain: bool,
    pub include_task_finetune: bool,
    pub optimizer: OptimizerConfig,
    /// Rows per graph; part of the numerical definition of a run.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            pretrain_epochs: 10,
            finetune_epochs: 10,
            lambda_enc: 1.0,
            lambda_dec: 0.1,
            lambda_u: 1.0,
            alpha_lr_scale: 1.0,
            include_task_pretrain: false,
            include_task_finetune: false,
            optimizer: OptimizerConfig::default(),
            chunk_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train: learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("train: batch and chunk sizes must be positive".into()));
        }
        for (name, l) in [
            ("lambda-enc", self.lambda_enc),
            ("lambda-dec", self.lambda_dec),
            ("lambda-u", self.lambda_u),
        ] {
            if !(l >= 0.0) {
                return Err(Error::Config(format!("train: {name} must be nonnegative")));
            }
        }
        if !(self.optimizer.clip > 0.0) || !(self.alpha_lr_scale >= 0.0) {
            return Err(Error::Config("train: clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: String,
    pub elbo: f64,
    pub reg_enc: f64,
    pub reg_dec: f64,
    pub unitarity: f64,
    pub objective: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.stage, r.elbo, r.reg_enc, r.reg_dec, r.unitarity, r.objective
        ));
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct Manifest {
    format_version: u32,
    module_versions: serde_json::Map<String, Value>,
    stage: String,
    model: Option<ModelSpec>,
    config: Value,
    epoch: usize,
    optimizer_step: u64,
    params: Vec<ParamEntry>,
    log: Vec<LogRow>,
    meta: serde_json::Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub model: Option<ModelSpec>,
    pub config: Value,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ParamStore,
    pub optim: OptimState,
    pub log: Vec<LogRow>,
    pub meta: serde_json::Map<String, Value>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, model: Option<ModelSpec>, config: Value, params: ParamStore) -> Self {
        Self {
            stage: stage.into(),
            model,
            config,
            epoch: 0,
            params,
            optim: OptimState::default(),
            log: Vec::new(),
            meta: serde_json::Map::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, t: &Tensor, entries: &mut Vec<ParamEntry>| {
            entries.push(ParamEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel() * 8;
        };
        for (name, t) in self.params.iter() {
            push(name.to_string(), t, &mut entries);
        }
        for (moments, prefix) in [(&self.optim.m, OPTIM_M), (&self.optim.v, OPTIM_V)] {
            for (i, m) in moments.iter().enumerate() {
                if let Some(m) = m {
                    let t = Tensor::new(self.params.tensor(i).shape().to_vec(), m.clone())?;
                    push(format!("{prefix}{}", self.params.name(i)), &t, &mut entries);
                }
            }
        }
        let mut versions = serde_json::Map::new();
        versions.insert("vibeam-core".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            module_versions: versions,
            stage: self.stage.clone(),
            model: self.model.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            optimizer_step: self.optim.step,
            params: entries,
            log: self.log.clone(),
            meta: self.meta.clone(),
        };
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        write_atomic(&dir.join(PARAMS_FILE), &blob)?;
        write_atomic(&dir.join(CHECKPOINT_FILE), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(CHECKPOINT_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format {} (expected {CHECKPOINT_VERSION})",
                manifest.format_version
            )));
        }
        let bpath = dir.join(PARAMS_FILE);
        let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut params = ParamStore::new();
        let mut moments = Vec::new();
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > blob.len() {
                return Err(Error::format(&bpath, format!("`{}` runs past the end of the blob", e.name)));
            }
            let data = blob[e.offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            if e.name.starts_with(OPTIM_M) || e.name.starts_with(OPTIM_V) {
                moments.push((e.name.clone(), t));
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let mut optim = OptimState {
            step: manifest.optimizer_step,
            m: vec![None; params.len()],
            v: vec![None; params.len()],
        };
        for (name, t) in moments {
            let (slot, base) = match name.strip_prefix(OPTIM_M) {
                Some(b) => (&mut optim.m, b),
                None => (&mut optim.v, &name[OPTIM_V.len()..]),
            };
            let i = params
                .index_of(base)
                .ok_or_else(|| Error::format(&bpath, format!("moment for unknown parameter `{base}`")))?;
            slot[i] = Some(t.into_data());
        }
        Ok(Self {
            stage: manifest.stage,
            model: manifest.model,
            config: manifest.config,
            epoch: manifest.epoch,
            params,
            optim,
            log: manifest.log,
            meta: manifest.meta,
        })
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(CHECKPOINT_FILE).is_file()
    }
}

pub fn pretrain_stage(modality: &str) -> String {
    format!("pretrain:{modality}")
}

pub const FINETUNE_STAGE: &str = "finetune";
pub const TASK_STAGE: &str = "task";

/// Parameters a Stage-I run for `modality` owns.
pub fn owned_by_pretrain(modality: &str, name: &str) -> bool {
    name.strip_prefix(modality).is_some_and(|r| r.starts_with('.'))
        || name.starts_with("shared_prior.")
        || name.starts_with("transition.")
}

/// Settings of one training loop.
pub struct StageRun<'a> {
    pub stage: String,
    pub epochs: usize,
    pub objective: ObjectiveConfig,
    pub trainable: &'a (dyn Fn(&str) -> bool + Sync),
    pub out: Option<&'a Path>,
    pub resume: bool,
    pub config: Value,
}

fn epoch_row(stage: &str, epoch: usize, acc: &ObjectiveReport) -> LogRow {
    LogRow {
        epoch,
        stage: stage.to_string(),
        elbo: acc.elbo,
        reg_enc: acc.reg_enc,
        reg_dec: acc.reg_dec,
        unitarity: acc.unitarity,
        objective: acc.objective,
    }
}

fn weighted(acc: &mut ObjectiveReport, r: &ObjectiveReport, w: f64) {
    acc.elbo += w * r.elbo;
    acc.reg_enc += w * r.reg_enc;
    acc.reg_dec += w * r.reg_dec;
    acc.unitarity += w * r.unitarity;
    acc.objective += w * r.objective;
}

/// Runs the epoch loop from `start` (or from the checkpoint in `run.out`
/// when resuming). The log starts with an epoch-0 row evaluated before
/// any update.
pub fn train_stage(
    model: &Model,
    start: Checkpoint,
    data: &SequenceBatch,
    cfg: &TrainConfig,
    seed: u64,
    run: &StageRun,
    exec: Exec,
) -> Result<Checkpoint> {
    use rand::seq::SliceRandom;
    cfg.validate()?;
    let mut ck = match run.out {
        Some(dir) if run.resume && Checkpoint::exists(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.stage != run.stage {
                return Err(Error::Incompatible(format!(
                    "cannot resume stage `{}` from a `{}` checkpoint",
                    run.stage, ck.stage
                )));
            }
            ck
        }
        _ => {
            let mut ck = start;
            ck.stage = run.stage.clone();
            ck.config = run.config.clone();
            ck.model = Some(model.spec.clone());
            ck
        }
    };
    let rows = data.rows;
    let lr_of = |name: &str| {
        if name == "poe.alpha_raw" {
            cfg.learning_rate * cfg.alpha_lr_scale
        } else {
            cfg.learning_rate
        }
    };

    if ck.log.is_empty() && rows > 0 {
        let never = crate::fusion::never_trainable;
        let mut acc = ObjectiveReport::default();
        for idx in (0..rows).collect::<Vec<_>>().chunks(cfg.batch_size) {
            let batch = data.gather(idx);
            let noise = NoiseMode::Sampled { seed, epoch: 0 };
            let (r, _) = model.objective(&ck.params, &batch, noise, &run.objective, &never, exec)?;
            weighted(&mut acc, &r, idx.len() as f64 / rows as f64);
        }
        ck.log.push(epoch_row(&run.stage, 0, &acc));
    }

    while ck.epoch < run.epochs && rows > 0 {
        let epoch = ck.epoch + 1;
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut substream(seed, Purpose::Shuffle, &[0, epoch as u64]));
        let mut acc = ObjectiveReport::default();
        let good = ck.clone();
        let noise = NoiseMode::Sampled {
            seed,
            epoch: epoch as u64,
        };
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.gather(idx);
            let step = model
                .objective(&ck.params, &batch, noise, &run.objective, run.trainable, exec)
                .and_then(|(r, grads)| {
                    apply_update(&mut ck, &grads, cfg, &lr_of)?;
                    Ok(r)
                });
            match step {
                Ok(r) => weighted(&mut acc, &r, idx.len() as f64 / rows as f64),
                Err(Error::NonFinite(reason)) => {
                    if let Some(dir) = run.out {
                        good.save(dir)?;
                        std::fs::write(dir.join(LOG_FILE), log_csv(&good.log))
                            .map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
                    }
                    return Err(Error::Diverged { epoch, reason });
                }
                Err(e) => return Err(e),
            }
        }
        if ck.params.iter().any(|(_, t)| !t.all_finite()) {
            if let Some(dir) = run.out {
                good.save(dir)?;
            }
            return Err(Error::Diverged {
                epoch,
                reason: "non-finite parameters".into(),
            });
        }
        ck.epoch = epoch;
        ck.log.push(epoch_row(&run.stage, epoch, &acc));
        if let Some(dir) = run.out {
            ck.save(dir)?;
        }
    }
    if let Some(dir) = run.out {
        ck.save(dir)?;
        std::fs::write(dir.join(LOG_FILE), log_csv(&ck.log)).map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
    }
    Ok(ck)
}

fn apply_update(ck: &mut Checkpoint, grads: &Grads, cfg: &TrainConfig, lr_of: &dyn Fn(&str) -> f64) -> Result<()> {
    // group parameters by learning rate; moments stay per parameter
    let distinct = grads
        .iter()
        .enumerate()
        .any(|(i, g)| g.is_some() && lr_of(ck.params.name(i)) != cfg.learning_rate);
    if !distinct {
        return optimizer_step(&mut ck.params, grads, &mut ck.optim, cfg.learning_rate, &cfg.optimizer);
    }
    let before = ck.params.clone();
    optimizer_step(&mut ck.params, grads, &mut ck.optim, cfg.learning_rate, &cfg.optimizer)?;
    for i in 0..ck.params.len() {
        let lr = lr_of(ck.params.name(i));
        if grads[i].is_none() || lr == cfg.learning_rate {
            continue;
        }
        let ratio = lr / cfg.learning_rate;
        let old = before.tensor(i).data().to_vec();
        for (p, o) in ck.params.tensor_mut(i).data_mut().iter_mut().zip(old) {
            *p = o + ratio * (*p - o);
        }
    }
    Ok(())
}

/// Stage I for one modality. `ds` should hold only that modality.
pub fn pretrain_unimodal(
    model: &Model,
    ds: &Dataset,
    modality: &str,
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
    config: Value,
    exec: Exec,
) -> Result<Checkpoint> {
    let m = model.spec.modality_index(modality)?;
    ds.modality(modality)?;
    let mut params = model.init_params(seed);
    model.fit_normalization(&mut params, ds, m)?;
    let drop: Vec<String> = model
        .spec
        .modalities
        .iter()
        .filter(|s| s.name != modality)
        .map(|s| s.name.clone())
        .collect();
    let indices: Vec<usize> = (0..ds.episodes).collect();
    let data = SequenceBatch::from_dataset(model, &params, ds, &indices, &drop)?;
    let include_task = cfg.include_task_pretrain && model.head.is_some();
    let owned = |name: &str| {
        owned_by_pretrain(modality, name) || (include_task && name.starts_with(crate::task::HEAD_PREFIX))
    };
    let keep = params.filter(|n| owned(n) || (include_task && n.starts_with(crate::task::HEAD_PREFIX)));
    let trainable = |name: &str| owned(name) && !is_buffer(name);
    let run = StageRun {
        stage: pretrain_stage(modality),
        epochs: cfg.pretrain_epochs,
        objective: ObjectiveConfig {
            lambda_enc: 0.0,
            lambda_dec: 0.0,
            lambda_u: cfg.lambda_u,
            include_task,
            chunk_size: cfg.chunk_size,
        },
        trainable: &trainable,
        out: None,
        resume: false,
        config,
    };
    // train on the full store so shapes line up; persist only owned entries
    let start = Checkpoint::new(run.stage.clone(), None, Value::Null, params);
    let ck = train_stage(model, start, &data, cfg, seed, &run, exec)?;
    let mut result = restrict(&ck, |n| keep.index_of(n).is_some());
    result.model = Some(model.spec.clone());
    if let Some(dir) = out {
        result.save(dir)?;
        std::fs::write(dir.join(LOG_FILE), log_csv(&result.log)).map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
    }
    Ok(result)
}

fn restrict(ck: &Checkpoint, keep: impl Fn(&str) -> bool) -> Checkpoint {
    let params = ck.params.filter(&keep);
    let mut optim = OptimState {
        step: ck.optim.step,
        m: vec![None; params.len()],
        v: vec![None; params.len()],
    };
    for i in 0..params.len() {
        if let Some(j) = ck.params.index_of(params.name(i)) {
            optim.m[i] = ck.optim.m.get(j).cloned().flatten();
            optim.v[i] = ck.optim.v.get(j).cloned().flatten();
        }
    }
    Checkpoint {
        params,
        optim,
        ..ck.clone()
    }
}

/// Multimodal initialization: modality parameters copied from their own
/// Stage-I checkpoint, shared prior and transition averaged element-wise,
/// fusion weights and head fresh.
pub fn init_from_experts(model: &Model, experts: &[Checkpoint], seed: u64) -> Result<ParamStore> {
    if experts.is_empty() {
        return Err(Error::Incompatible("no expert checkpoints".into()));
    }
    let mut params = model.init_params(seed);
    let mut covered = vec![false; model.spec.modalities.len()];
    for ck in experts {
        let spec = ck
            .model
            .as_ref()
            .ok_or_else(|| Error::Incompatible(format!("checkpoint `{}` has no model description", ck.stage)))?;
        if spec.latent != model.spec.latent || spec.steps != model.spec.steps {
            return Err(Error::Incompatible(format!(
                "checkpoint `{}` was trained with a different latent configuration",
                ck.stage
            )));
        }
        let Some(name) = ck.stage.strip_prefix("pretrain:") else {
            return Err(Error::Incompatible(format!("`{}` is not a pretraining checkpoint", ck.stage)));
        };
        let m = model
            .spec
            .modality_index(name)
            .map_err(|_| Error::Incompatible(format!("model has no modality `{name}`")))?;
        if model.spec.modalities[m] != spec.modalities[spec.modality_index(name)?] {
            return Err(Error::Incompatible(format!("modality `{name}` shape differs")));
        }
        if covered[m] {
            return Err(Error::Incompatible(format!("two checkpoints for `{name}`")));
        }
        covered[m] = true;
        let prefix = format!("{name}.");
        for (pname, t) in ck.params.iter().filter(|(n, _)| n.starts_with(&prefix)) {
            let dst = params.require(pname)?;
            if dst.shape() != t.shape() {
                return Err(Error::Incompatible(format!("shape of `{pname}` differs")));
            }
            params.insert(pname.to_string(), t.clone());
        }
    }
    let k = experts.len() as f64;
    for i in 0..params.len() {
        let name = params.name(i).to_string();
        if !(name.starts_with("shared_prior.") || name.starts_with("transition.")) {
            continue;
        }
        let mut sum = vec![0.0; params.tensor(i).numel()];
        for ck in experts {
            let t = ck.params.require(&name)?;
            if t.numel() != sum.len() {
                return Err(Error::Incompatible(format!("shape of `{name}` differs")));
            }
            for (s, v) in sum.iter_mut().zip(t.data()) {
                *s += v;
            }
        }
        for (p, s) in params.tensor_mut(i).data_mut().iter_mut().zip(sum) {
            *p = s / k;
        }
    }
    Ok(params)
}

/// Stage II over the episodes in `indices`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_multimodal(
    model: &Model,
    init: ParamStore,
    ds: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
    resume: bool,
    config: Value,
    exec: Exec,
) -> Result<Checkpoint> {
    let data = SequenceBatch::from_dataset(model, &init, ds, indices, &[])?;
    let include_task = cfg.include_task_finetune && model.head.is_some();
    let trainable = |name: &str| include_task || !name.starts_with(crate::task::HEAD_PREFIX);
    let run = StageRun {
        stage: FINETUNE_STAGE.to_string(),
        epochs: cfg.finetune_epochs,
        objective: ObjectiveConfig {
            lambda_enc: cfg.lambda_enc,
            lambda_dec: cfg.lambda_dec,
            lambda_u: cfg.lambda_u,
            include_task,
            chunk_size: cfg.chunk_size,
        },
        trainable: &trainable,
        out,
        resume,
        config,
    };
    let start = Checkpoint::new(FINETUNE_STAGE, Some(model.spec.clone()), Value::Null, init);
    train_stage(model, start, &data, cfg, seed, &run, exec)
}

pub fn log_path(dir: &Path) -> PathBuf {
    dir.join(LOG_FILE)
}
