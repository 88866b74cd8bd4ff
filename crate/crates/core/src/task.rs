//! Beam classifier over frozen representations.

use serde::{Deserialize, Serialize};
use vibeam_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::fusion::{chunk_ranges, insert_mlp, mlp, mlp_dims, Binder, Grads, StepPosterior};
use crate::par::{map_indexed, Exec};
use crate::params::ParamStore;
use crate::rng::{substream, Purpose};
use crate::trainer::{optimizer_step, OptimState, OptimizerConfig};

pub const HEAD_PREFIX: &str = "task";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Past shared latents used beyond the current one; `None` uses the
    /// whole episode.
    pub window: Option<usize>,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            window: None,
            hidden: vec![128, 256, 64, 32],
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("task: hidden widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("task: learning rate and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn window_for(&self, steps: usize) -> Result<usize> {
        let n = self.window.unwrap_or(steps.saturating_sub(1));
        if n + 1 > steps {
            return Err(Error::InvalidArgument(format!(
                "window of {n} past latents needs {} steps, episode has {steps}",
                n + 1
            )));
        }
        Ok(n)
    }
}

/// Mean of the fused shared posterior.
pub fn posterior_mean(step: &StepPosterior) -> Vec<f64> {
    step.fused.mean().to_vec()
}

/// `[z_{t-N}, ..., z_t, h_{t-1}]`; `latents` are in time order and the
/// last `window + 1` of them are used.
pub fn aggregate(latents: &[Vec<f64>], h_prev: &[f64], window: usize) -> Result<Vec<f64>> {
    if latents.len() < window + 1 {
        return Err(Error::InvalidArgument(format!(
            "window of {window} past latents needs {} steps, got {}",
            window + 1,
            latents.len()
        )));
    }
    let mut c: Vec<f64> = latents[latents.len() - window - 1..].concat();
    c.extend_from_slice(h_prev);
    Ok(c)
}

pub fn init_head(cfg: &TaskConfig, input: usize, classes: usize, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    insert_mlp(&mut s, seed, HEAD_PREFIX, &mlp_dims(input, &cfg.hidden, classes), true);
    s
}

pub fn head_input_dim(params: &ParamStore) -> Result<usize> {
    Ok(params.require(&format!("{HEAD_PREFIX}.l0.w"))?.shape()[0])
}

pub fn head_logits(g: &mut Graph, b: &mut Binder, cfg: &TaskConfig, c: Var) -> Result<Var> {
    mlp(g, b, HEAD_PREFIX, c, cfg.hidden.len() + 1)
}

/// Summed softmax cross-entropy of `[n, B]` logits.
pub fn nll_sum(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let (n, classes) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: l, classes });
    }
    // shift by a constant row max, then log-sum-exp via a ones matmul
    let vals = g.value(logits).data().to_vec();
    let shift: Vec<f64> = vals
        .chunks_exact(classes)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            std::iter::repeat(m).take(classes)
        })
        .collect();
    let shift = g.constant(Tensor::new(vec![n, classes], shift)?);
    let z = g.sub(logits, shift)?;
    let e = g.exp(z)?;
    let ones = g.constant(Tensor::full(vec![classes, 1], 1.0));
    let sums = g.matmul(e, ones)?;
    let lse = g.log(sums)?;
    let mut onehot = vec![0.0; n * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }
    let onehot = g.constant(Tensor::new(vec![n, classes], onehot)?);
    let picked = g.mul(z, onehot)?;
    let picked = g.sum(picked)?;
    let total = g.sum(lse)?;
    Ok(g.sub(total, picked)?)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn logits_rows(params: &ParamStore, cfg: &TaskConfig, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let input = head_input_dim(params)?;
    if let Some(r) = rows.iter().find(|r| r.len() != input) {
        return Err(Error::Dimension(format!("head expects {input} inputs, got {}", r.len())));
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let never = crate::fusion::never_trainable;
    let mut b = Binder::new(params, &never);
    let c = g.constant(Tensor::new(vec![rows.len(), input], rows.concat())?);
    let out = head_logits(&mut g, &mut b, cfg, c)?;
    let classes = g.shape(out)[1];
    Ok(g.value(out).data().chunks_exact(classes).map(|r| r.to_vec()).collect())
}

/// Class probabilities of one aggregated input.
pub fn predict(params: &ParamStore, cfg: &TaskConfig, c: &[f64]) -> Result<Vec<f64>> {
    let l = logits_rows(params, cfg, &[c.to_vec()])?;
    Ok(softmax(&l[0]))
}

/// Predicted beams of many inputs, evaluated in fixed chunks.
pub fn predict_beams(params: &ParamStore, cfg: &TaskConfig, rows: &[Vec<f64>], exec: Exec) -> Result<Vec<usize>> {
    let chunks = chunk_ranges(rows.len(), 256);
    let out = map_indexed(exec, chunks.len(), |c| logits_rows(params, cfg, &rows[chunks[c].clone()]));
    let mut beams = Vec::with_capacity(rows.len());
    for l in out {
        beams.extend(l?.iter().map(|r| argmax(r)));
    }
    Ok(beams)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochAccuracy {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy and its gradient over `idx`.
fn head_grad(
    params: &ParamStore,
    cfg: &TaskConfig,
    features: &[Vec<f64>],
    labels: &[usize],
    idx: &[usize],
    exec: Exec,
) -> Result<(f64, Grads)> {
    let chunks = chunk_ranges(idx.len(), 16);
    let n = idx.len() as f64;
    let all = |_: &str| true;
    let parts = map_indexed(exec, chunks.len(), |c| -> Result<(f64, Vec<(usize, Vec<f64>)>)> {
        let rows: Vec<usize> = idx[chunks[c].clone()].to_vec();
        let input = features[rows[0]].len();
        let mut g = Graph::new();
        let mut b = Binder::new(params, &all);
        let x: Vec<f64> = rows.iter().flat_map(|&i| features[i].iter().copied()).collect();
        let x = g.constant(Tensor::new(vec![rows.len(), input], x)?);
        let logits = head_logits(&mut g, &mut b, cfg, x)?;
        let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let nll = nll_sum(&mut g, logits, &y)?;
        let value = g.value(nll).item();
        let loss = g.scale(nll, 1.0 / n)?;
        g.backward(loss)?;
        let grads = b
            .trainable_vars(&g)
            .into_iter()
            .map(|(i, v)| (i, g.grad(v).expect("trainable leaf").data().to_vec()))
            .collect();
        Ok((value, grads))
    });
    let mut total = 0.0;
    let mut grads: Grads = vec![None; params.len()];
    for p in parts {
        let (v, gs) = p?;
        total += v;
        for (i, gv) in gs {
            match &mut grads[i] {
                Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                slot => *slot = Some(gv),
            }
        }
    }
    Ok((total / n, grads))
}

/// Trains a fresh head on fixed features; returns the head and the
/// per-epoch training loss and accuracy.
pub fn train_head(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &TaskConfig,
    seed: u64,
    exec: Exec,
) -> Result<(ParamStore, Vec<EpochAccuracy>)> {
    use rand::seq::SliceRandom;
    cfg.validate()?;
    if classes < 2 {
        return Err(Error::InvalidArgument("the head needs at least two classes".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Dimension("features and labels differ in length".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: l, classes });
    }
    let input = features.first().map(|f| f.len()).unwrap_or(0);
    let mut params = init_head(cfg, input.max(1), classes, seed);
    let mut state = OptimState::default();
    let opt = OptimizerConfig::default();
    let mut history = Vec::new();
    if features.is_empty() {
        return Ok((params, history));
    }
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut substream(seed, Purpose::Shuffle, &[1, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = head_grad(&params, cfg, features, labels, batch, exec)?;
            loss_sum += loss * batch.len() as f64;
            optimizer_step(&mut params, &grads, &mut state, cfg.learning_rate, &opt)?;
        }
        let preds = predict_beams(&params, cfg, features, exec)?;
        history.push(EpochAccuracy {
            epoch: epoch + 1,
            loss: loss_sum / features.len() as f64,
            accuracy: accuracy(&preds, labels),
        });
    }
    Ok((params, history))
}

pub fn write_accuracy_csv(path: &std::path::Path, history: &[EpochAccuracy]) -> Result<()> {
    let mut s = String::from("epoch,loss,accuracy\n");
    for h in history {
        s.push_str(&format!("{},{:.9},{:.6}\n", h.epoch, h.loss, h.accuracy));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
