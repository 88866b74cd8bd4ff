//! Sequential dual-latent generative model with product-of-experts fusion.
//!
//! Each step `t` has a shared latent `z_s` fused across the present
//! modalities, one private latent `z_p` per modality that is never fused,
//! and a deterministic recurrent state `h` updated by a gated cell from
//! `(h_{t-1}, z_s, z_p...)`. Batches are split into fixed-size chunks;
//! every chunk is one graph, so results do not depend on how many
//! workers evaluate them.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use vibeam_autodiff::{Graph, Tensor, Var};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::frontend::{Frontend, FrontendDims, FrontendVars, WindowKind};
use crate::par::{map_indexed, map_owned, Exec};
use crate::params::{is_buffer, ParamStore};
use crate::prob::{kl_terms, poe_graph, softplus_inverse_of_one, DiagGaussian, Expert, GaussVar};
use crate::rng::{normal, normals, substream, Purpose};
use crate::scene::{SceneConfig, RADAR_CUBE};
use crate::task::{self, TaskConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Residuals wider than this are projected before the covariance penalty.
pub const REG_DEC_MAX_DIM: usize = 64;
const PROJECTION_SEED: u64 = 0x5eed_0f_dec0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub shared_dim: usize,
    pub private_dim: usize,
    pub state_dim: usize,
    /// Hidden widths of every encoder, decoder and prior network.
    pub hidden: Vec<usize>,
    /// Dual latents; `false` gives the shared-only model.
    pub private: bool,
    /// Chirp extent after zero padding in the radar frontend.
    pub radar_padded_chirps: usize,
    pub window: WindowKind,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            shared_dim: 16,
            private_dim: 16,
            state_dim: 32,
            hidden: vec![64, 64],
            private: true,
            radar_padded_chirps: 8,
            window: WindowKind::Hamming,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_dim == 0 || self.state_dim == 0 || (self.private && self.private_dim == 0) {
            return Err(Error::Config("latent: dimensions must be at least 1".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("latent: hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityKind {
    Vector,
    Radar(FrontendDims),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    /// Flattened input size of one step.
    pub dim: usize,
    pub kind: ModalityKind,
}

impl ModalitySpec {
    /// Width seen by the encoders and produced by the decoder network.
    pub fn feature_dim(&self) -> usize {
        match &self.kind {
            ModalityKind::Vector => self.dim,
            ModalityKind::Radar(d) => d.feature_dim(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent: LatentConfig,
    pub steps: usize,
    pub modalities: Vec<ModalitySpec>,
}

impl ModelSpec {
    pub fn from_scene(scene: &SceneConfig, latent: &LatentConfig, names: &[&str]) -> Result<Self> {
        latent.validate()?;
        let mut modalities = Vec::new();
        for &name in names {
            let shape = scene.modality_shape(name)?;
            let dim = shape.iter().product();
            let kind = if name == RADAR_CUBE {
                ModalityKind::Radar(FrontendDims {
                    antennas: scene.rx_antennas,
                    samples: scene.radar_samples,
                    chirps: scene.radar_chirps,
                    padded: latent.radar_padded_chirps,
                })
            } else {
                ModalityKind::Vector
            };
            modalities.push(ModalitySpec {
                name: name.to_string(),
                dim,
                kind,
            });
        }
        Ok(Self {
            latent: latent.clone(),
            steps: scene.steps,
            modalities,
        })
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// `(fan_in, fan_out)` of every layer.
pub fn mlp_dims(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &w in hidden {
        dims.push((prev, w));
        prev = w;
    }
    dims.push((prev, output));
    dims
}

/// Gaussian weights with variance `1 / fan_in` drawn from a stream keyed
/// by the parameter name, so a parameter's initial value does not depend
/// on which other parameters exist.
pub fn init_weight(seed: u64, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let mut rng = substream(seed, Purpose::Init, &[fnv1a(name)]);
    let sd = gain / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| sd * normal(&mut rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("weight shape")
}

pub fn insert_mlp(store: &mut ParamStore, seed: u64, prefix: &str, dims: &[(usize, usize)], zero_last: bool) {
    for (k, &(i, o)) in dims.iter().enumerate() {
        let wname = format!("{prefix}.l{k}.w");
        let last = k + 1 == dims.len();
        let w = if last && zero_last {
            Tensor::zeros(vec![i, o])
        } else {
            init_weight(seed, &wname, i, o, 1.0)
        };
        store.insert(wname, w);
        store.insert(format!("{prefix}.l{k}.b"), Tensor::zeros(vec![o]));
    }
}

/// Resolves parameter names to graph leaves, binding each at most once
/// per graph. Trainable names become gradient leaves, the rest constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: &'a (dyn Fn(&str) -> bool + Sync),
    vars: HashMap<usize, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a (dyn Fn(&str) -> bool + Sync)) -> Self {
        Self {
            store,
            trainable,
            vars: HashMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))?;
        if let Some(&v) = self.vars.get(&idx) {
            return Ok(v);
        }
        let t = self.store.tensor(idx).clone();
        let v = if !is_buffer(name) && (self.trainable)(name) {
            g.param(t)
        } else {
            g.constant(t)
        };
        self.vars.insert(idx, v);
        Ok(v)
    }

    /// Trainable leaves bound so far, by store index.
    pub fn trainable_vars(&self, g: &Graph) -> Vec<(usize, Var)> {
        let mut out: Vec<(usize, Var)> = self
            .vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(&i, &v)| (i, v))
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    }
}

pub fn never_trainable(_: &str) -> bool {
    false
}

/// GELU MLP with a linear output layer.
pub fn mlp(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, layers: usize) -> Result<Var> {
    let mut h = x;
    for k in 0..layers {
        let w = b.get(g, &format!("{prefix}.l{k}.w"))?;
        let bias = b.get(g, &format!("{prefix}.l{k}.b"))?;
        h = g.affine(h, w, bias)?;
        if k + 1 < layers {
            h = g.gelu(h)?;
        }
    }
    Ok(h)
}

/// Sum of a `[n, d]` variable over the rows flagged in `rows`.
pub fn masked_total(g: &mut Graph, x: Var, rows: &[bool]) -> Result<Var> {
    if rows.iter().all(|&r| r) {
        return Ok(g.sum(x)?);
    }
    let d = g.shape(x)[1];
    let mask: Vec<f64> = rows
        .iter()
        .flat_map(|&r| std::iter::repeat(if r { 1.0 } else { 0.0 }).take(d))
        .collect();
    let m = g.constant(Tensor::new(vec![rows.len(), d], mask)?);
    let p = g.mul(x, m)?;
    Ok(g.sum(p)?)
}

fn row_mask(g: &mut Graph, rows: &[bool], d: usize) -> Result<Var> {
    let mask: Vec<f64> = rows
        .iter()
        .flat_map(|&r| std::iter::repeat(if r { 1.0 } else { 0.0 }).take(d))
        .collect();
    Ok(g.constant(Tensor::new(vec![rows.len(), d], mask)?))
}

fn accumulate(g: &mut Graph, acc: &mut Option<Var>, v: Var) -> Result<()> {
    *acc = Some(match *acc {
        Some(a) => g.add(a, v)?,
        None => v,
    });
    Ok(())
}

/// Normalized inputs of a set of episodes.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub rows: usize,
    pub steps: usize,
    /// Noise stream id of every row.
    pub episodes: Vec<u64>,
    /// Per modality `[rows, steps, dim]`, `None` when not loaded.
    pub x: Vec<Option<Vec<f64>>>,
    /// Per modality `[rows, steps]`.
    pub present: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

impl SequenceBatch {
    /// Builds normalized inputs for `indices` of `ds`. Modalities in
    /// `drop` and modalities absent from `ds` are marked absent.
    pub fn from_dataset(
        model: &Model,
        params: &ParamStore,
        ds: &Dataset,
        indices: &[usize],
        drop: &[String],
    ) -> Result<Self> {
        let spec = &model.spec;
        if ds.steps != spec.steps {
            return Err(Error::Incompatible(format!(
                "dataset has {} steps, model expects {}",
                ds.steps, spec.steps
            )));
        }
        let t_n = ds.steps;
        let mut x = Vec::new();
        let mut present = Vec::new();
        for m in &spec.modalities {
            let dropped = drop.iter().any(|d| d == &m.name);
            let Some(mi) = ds.modality_index(&m.name).filter(|_| !dropped) else {
                x.push(None);
                present.push(vec![false; indices.len() * t_n]);
                continue;
            };
            if ds.modalities[mi].dim() != m.dim {
                return Err(Error::Incompatible(format!(
                    "modality {} has {} features, model expects {}",
                    m.name,
                    ds.modalities[mi].dim(),
                    m.dim
                )));
            }
            let mean = params.require(&format!("{}.norm.mean", m.name))?.data().to_vec();
            let std = params.require(&format!("{}.norm.std", m.name))?.data().to_vec();
            let mut vals = Vec::with_capacity(indices.len() * t_n * m.dim);
            let mut pres = Vec::with_capacity(indices.len() * t_n);
            for &e in indices {
                for t in 0..t_n {
                    let p = ds.present(&m.name, e, t);
                    pres.push(p);
                    let raw = ds.step(mi, e, t);
                    for (j, &v) in raw.iter().enumerate() {
                        let (mu, sd) = if mean.len() == 1 { (mean[0], std[0]) } else { (mean[j], std[j]) };
                        vals.push(if p { (v as f64 - mu) / sd } else { 0.0 });
                    }
                }
            }
            x.push(Some(vals));
            present.push(pres);
        }
        Ok(Self {
            rows: indices.len(),
            steps: t_n,
            episodes: indices.iter().map(|&i| i as u64).collect(),
            x,
            present,
            labels: indices.iter().map(|&i| ds.label(i)).collect(),
        })
    }

    pub fn slice(&self, rows: Range<usize>) -> Self {
        let t = self.steps;
        let x = self
            .x
            .iter()
            .map(|v| {
                v.as_ref().map(|v| {
                    let per = v.len() / self.rows.max(1);
                    v[rows.start * per..rows.end * per].to_vec()
                })
            })
            .collect();
        Self {
            rows: rows.len(),
            steps: t,
            episodes: self.episodes[rows.clone()].to_vec(),
            x,
            present: self.present.iter().map(|p| p[rows.start * t..rows.end * t].to_vec()).collect(),
            labels: self.labels[rows].to_vec(),
        }
    }

    /// Rows `idx` in the given order.
    pub fn gather(&self, idx: &[usize]) -> Self {
        let t = self.steps;
        let x = self
            .x
            .iter()
            .map(|v| {
                v.as_ref().map(|v| {
                    let per = v.len() / self.rows.max(1);
                    idx.iter().flat_map(|&i| v[i * per..(i + 1) * per].iter().copied()).collect()
                })
            })
            .collect();
        Self {
            rows: idx.len(),
            steps: t,
            episodes: idx.iter().map(|&i| self.episodes[i]).collect(),
            x,
            present: self
                .present
                .iter()
                .map(|p| idx.iter().flat_map(|&i| p[i * t..(i + 1) * t].iter().copied()).collect())
                .collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn dim(&self, m: usize) -> usize {
        self.x[m].as_ref().map(|v| v.len() / (self.rows * self.steps).max(1)).unwrap_or(0)
    }

    /// Rows of step `t` of modality `m`, `[rows, dim]`.
    fn step_values(&self, m: usize, t: usize) -> Option<Vec<f64>> {
        let v = self.x[m].as_ref()?;
        let d = self.dim(m);
        let mut out = Vec::with_capacity(self.rows * d);
        for i in 0..self.rows {
            let off = (i * self.steps + t) * d;
            out.extend_from_slice(&v[off..off + d]);
        }
        Some(out)
    }

    fn step_mask(&self, m: usize, t: usize) -> Vec<bool> {
        (0..self.rows).map(|i| self.present[m][i * self.steps + t]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseMode {
    /// Latents take their posterior means.
    Zero,
    Sampled { seed: u64, epoch: u64 },
    /// Every standard-normal draw replaced by the same value; two-point
    /// quadrature over `±1` gives exact expectations of quadratics.
    Constant(f64),
}

/// Terms of one step for one chunk.
pub struct StepVars {
    pub prior: GaussVar,
    pub experts: Vec<Option<GaussVar>>,
    pub private: Vec<Option<GaussVar>>,
    pub fused: GaussVar,
    pub z_shared: Var,
    pub z_private: Vec<Option<Var>>,
    pub state: Var,
    /// Log-likelihood sum and residual per active modality.
    pub recon: Vec<Option<(Var, Var)>>,
    pub kl_shared: Var,
    pub kl_private: Vec<Option<Var>>,
    pub reg_enc: Vec<Option<Var>>,
}

/// Posterior quantities of one step for a single sample.
#[derive(Clone, Debug)]
pub struct StepPosterior {
    pub prior: DiagGaussian,
    pub experts: Vec<Option<DiagGaussian>>,
    pub fused: DiagGaussian,
    pub private: Vec<Option<DiagGaussian>>,
    pub z_shared: Vec<f64>,
    pub z_private: Vec<Option<Vec<f64>>>,
    pub state: Vec<f64>,
}

pub struct Residual {
    pub t: usize,
    pub modality: usize,
    pub var: Var,
    pub rows: Vec<bool>,
}

/// Summed terms of a chunk.
pub struct SequenceTerms {
    pub recon: Option<Var>,
    pub kl_shared: Option<Var>,
    pub kl_private: Option<Var>,
    pub reg_enc: Option<Var>,
    pub task_ll: Option<Var>,
    pub elbo: Var,
    pub residuals: Vec<Residual>,
    pub fused_means: Vec<Var>,
    /// `states[t]` is the state entering step `t`; `states[0] = h_0`.
    pub states: Vec<Var>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ElboReport {
    pub elbo: f64,
    pub recon: f64,
    pub kl_shared: f64,
    pub kl_private: f64,
    pub task_ll: f64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveConfig {
    pub lambda_enc: f64,
    pub lambda_dec: f64,
    pub lambda_u: f64,
    pub include_task: bool,
    pub chunk_size: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveReport {
    pub elbo: f64,
    pub reg_enc: f64,
    pub reg_dec: f64,
    pub unitarity: f64,
    pub objective: f64,
}

/// Gradient per parameter-store index; `None` for untouched entries.
pub type Grads = Vec<Option<Vec<f64>>>;

/// Optional task head used when the task likelihood enters the ELBO.
#[derive(Clone, Debug)]
pub struct HeadSpec {
    pub config: TaskConfig,
    pub classes: usize,
}

pub struct Model {
    pub spec: ModelSpec,
    frontends: Vec<Option<Frontend>>,
    pub head: Option<HeadSpec>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.latent.validate()?;
        let frontends = spec
            .modalities
            .iter()
            .map(|m| match &m.kind {
                ModalityKind::Radar(d) => Frontend::new(*d, spec.latent.window).map(Some),
                ModalityKind::Vector => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            frontends,
            head: None,
        })
    }

    pub fn with_head(mut self, head: HeadSpec) -> Self {
        self.head = Some(head);
        self
    }

    fn layers(&self) -> usize {
        self.spec.latent.hidden.len() + 1
    }

    pub fn transition_input_dim(&self) -> usize {
        let l = &self.spec.latent;
        l.shared_dim + if l.private { self.spec.modalities.len() * l.private_dim } else { 0 }
    }

    /// Width of the task-head input for a window of `window` past latents.
    pub fn aggregate_dim(&self, window: usize) -> usize {
        (window + 1) * self.spec.latent.shared_dim + self.spec.latent.state_dim
    }

    /// Parameters owned by modality `m` (networks, frontend, buffers).
    pub fn modality_prefix(&self, m: usize) -> String {
        format!("{}.", self.spec.modalities[m].name)
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let l = &self.spec.latent;
        let (ds, dp, dh) = (l.shared_dim, l.private_dim, l.state_dim);
        let mut s = ParamStore::new();
        for m in &self.spec.modalities {
            let name = &m.name;
            let fd = m.feature_dim();
            insert_mlp(&mut s, seed, &format!("{name}.enc_shared"), &mlp_dims(fd + dh, &l.hidden, 2 * ds), false);
            if l.private {
                insert_mlp(&mut s, seed, &format!("{name}.enc_private"), &mlp_dims(fd + dh, &l.hidden, 2 * dp), false);
                insert_mlp(&mut s, seed, &format!("{name}.prior_private"), &mlp_dims(dh, &l.hidden, 2 * dp), false);
            }
            let dec_in = ds + if l.private { dp } else { 0 } + dh;
            insert_mlp(&mut s, seed, &format!("{name}.dec"), &mlp_dims(dec_in, &l.hidden, fd), false);
            s.insert(format!("{name}.log_var"), Tensor::scalar(0.0));
            match &m.kind {
                ModalityKind::Radar(d) => {
                    s.insert(format!("{name}.window.delta_s"), Tensor::zeros(vec![d.samples]));
                    s.insert(format!("{name}.window.delta_c"), Tensor::zeros(vec![d.padded]));
                    s.insert(format!("{name}.dft.delta_r"), Tensor::zeros(vec![2, d.samples, d.samples]));
                    s.insert(format!("{name}.dft.delta_d"), Tensor::zeros(vec![2, d.padded, d.padded]));
                    s.insert(format!("{name}.norm.mean"), Tensor::zeros(vec![1]));
                    s.insert(format!("{name}.norm.std"), Tensor::full(vec![1], 1.0));
                }
                ModalityKind::Vector => {
                    s.insert(format!("{name}.norm.mean"), Tensor::zeros(vec![m.dim]));
                    s.insert(format!("{name}.norm.std"), Tensor::full(vec![m.dim], 1.0));
                }
            }
        }
        insert_mlp(&mut s, seed, "shared_prior", &mlp_dims(dh, &l.hidden, 2 * ds), false);
        let tin = dh + self.transition_input_dim();
        for gate in ["gate", "cand"] {
            let w = format!("transition.{gate}.w");
            s.insert(w.clone(), init_weight(seed, &w, tin, dh, 1.0));
            s.insert(format!("transition.{gate}.b"), Tensor::zeros(vec![dh]));
        }
        s.insert(
            "poe.alpha_raw",
            Tensor::full(vec![self.spec.modalities.len()], softplus_inverse_of_one()),
        );
        s
    }

    /// Sets the normalization buffers of `m` from the present entries of `ds`.
    pub fn fit_normalization(&self, params: &mut ParamStore, ds: &Dataset, m: usize) -> Result<()> {
        let spec = &self.spec.modalities[m];
        let data = ds.modality(&spec.name)?;
        let d = spec.dim;
        let mut count = 0usize;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for e in 0..ds.episodes {
            for t in 0..ds.steps {
                if !ds.present(&spec.name, e, t) {
                    continue;
                }
                count += 1;
                let off = (e * ds.steps + t) * d;
                for j in 0..d {
                    let v = data.values[off + j] as f64;
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
        }
        let n = count.max(1) as f64;
        let (mean, std) = match spec.kind {
            ModalityKind::Radar(_) => {
                // one scale for the whole cube keeps the frontend linear
                let total: f64 = sq.iter().sum::<f64>() / (n * d as f64);
                (vec![0.0], vec![total.sqrt().max(1e-6)])
            }
            ModalityKind::Vector => {
                let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
                let std = sq
                    .iter()
                    .zip(&mean)
                    .map(|(q, mu)| (q / n - mu * mu).max(0.0).sqrt().max(1e-6))
                    .collect();
                (mean, std)
            }
        };
        let len = mean.len();
        params.insert(format!("{}.norm.mean", spec.name), Tensor::new(vec![len], mean)?);
        params.insert(format!("{}.norm.std", spec.name), Tensor::new(vec![len], std)?);
        Ok(())
    }

    fn frontend_vars(&self, g: &mut Graph, b: &mut Binder, m: usize) -> Result<FrontendVars> {
        let name = &self.spec.modalities[m].name;
        Ok(FrontendVars {
            delta_s: b.get(g, &format!("{name}.window.delta_s"))?,
            delta_c: b.get(g, &format!("{name}.window.delta_c"))?,
            delta_r: b.get(g, &format!("{name}.dft.delta_r"))?,
            delta_d: b.get(g, &format!("{name}.dft.delta_d"))?,
        })
    }

    fn gaussian_net(&self, g: &mut Graph, b: &mut Binder, prefix: &str, x: Var, d: usize) -> Result<GaussVar> {
        let out = mlp(g, b, prefix, x, self.layers())?;
        GaussVar::from_output(g, out, d)
    }

    /// One step for `n` rows. `xs[m]` holds `[n, dim]` inputs of modality
    /// `m` when at least one row observes it, `masks[m]` the per-row
    /// presence. Noise slices are `[n, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        h_prev: Var,
        xs: &[Option<Vec<f64>>],
        masks: &[Vec<bool>],
        eps_shared: &[f64],
        eps_private: &[Vec<f64>],
    ) -> Result<StepVars> {
        let l = &self.spec.latent;
        let (ds, dp) = (l.shared_dim, l.private_dim);
        let n = g.shape(h_prev)[0];
        let mcount = self.spec.modalities.len();
        let prior = self.gaussian_net(g, b, "shared_prior", h_prev, ds)?;

        let mut experts = vec![None; mcount];
        let mut private = vec![None; mcount];
        let mut features = vec![None; mcount];
        let mut fe_vars = vec![None; mcount];
        let mut poe_parts = Vec::new();
        let alpha_raw = b.get(g, "poe.alpha_raw")?;
        for m in 0..mcount {
            let Some(x) = &xs[m] else { continue };
            let spec = &self.spec.modalities[m];
            let xv = g.constant(Tensor::new(vec![n, spec.dim], x.clone())?);
            let feat = match &self.frontends[m] {
                Some(fe) => {
                    let fv = self.frontend_vars(g, b, m)?;
                    fe_vars[m] = Some(fv);
                    let rows: Vec<&[f64]> = x.chunks_exact(spec.dim).collect();
                    let cube = g.constant(fe.input_tensor(&rows)?);
                    fe.forward(g, &fv, cube)?
                }
                None => xv,
            };
            features[m] = Some(xv);
            let enc_in = g.concat(&[feat, h_prev], 1)?;
            let q = self.gaussian_net(g, b, &format!("{}.enc_shared", spec.name), enc_in, ds)?;
            if l.private {
                private[m] = Some(self.gaussian_net(g, b, &format!("{}.enc_private", spec.name), enc_in, dp)?);
            }
            let a = g.slice(alpha_raw, 0, m, 1)?;
            let alpha = g.softplus(a)?;
            let mask = row_mask(g, &masks[m], ds)?;
            poe_parts.push(Expert { dist: q, alpha, mask });
            experts[m] = Some(q);
        }
        let fused = poe_graph(g, prior, &poe_parts)?;
        let eps_s = g.constant(Tensor::new(vec![n, ds], eps_shared.to_vec())?);
        let z_shared = fused.sample(g, eps_s)?;
        let kl_s = kl_terms(g, fused, prior)?;
        let kl_shared = g.sum(kl_s)?;

        let mut z_private = vec![None; mcount];
        let mut kl_private = vec![None; mcount];
        let mut slots = vec![z_shared];
        if l.private {
            for m in 0..mcount {
                match private[m] {
                    Some(q) => {
                        let pp = self.gaussian_net(
                            g,
                            b,
                            &format!("{}.prior_private", self.spec.modalities[m].name),
                            h_prev,
                            dp,
                        )?;
                        let eps = g.constant(Tensor::new(vec![n, dp], eps_private[m].clone())?);
                        let z = q.sample(g, eps)?;
                        let klp = kl_terms(g, q, pp)?;
                        kl_private[m] = Some(masked_total(g, klp, &masks[m])?);
                        let mask = row_mask(g, &masks[m], dp)?;
                        slots.push(g.mul(z, mask)?);
                        z_private[m] = Some(z);
                    }
                    None => slots.push(g.constant(Tensor::zeros(vec![n, dp]))),
                }
            }
        }

        let mut recon = vec![None; mcount];
        let mut reg_enc = vec![None; mcount];
        for m in 0..mcount {
            let (Some(q), Some(xv)) = (experts[m], features[m]) else { continue };
            let spec = &self.spec.modalities[m];
            let mut parts = vec![z_shared];
            if let Some(z) = z_private[m] {
                parts.push(z);
            }
            parts.push(h_prev);
            let dec_in = g.concat(&parts, 1)?;
            let out = mlp(g, b, &format!("{}.dec", spec.name), dec_in, self.layers())?;
            let xhat = match (&self.frontends[m], fe_vars[m]) {
                (Some(fe), Some(fv)) => fe.inverse(g, &fv, out)?,
                _ => out,
            };
            let r = g.sub(xv, xhat)?;
            let sq = g.square(r)?;
            let sse = masked_total(g, sq, &masks[m])?;
            let count = masks[m].iter().filter(|&&p| p).count() as f64;
            let lv = b.get(g, &format!("{}.log_var", spec.name))?;
            let lv = g.clamp(lv, crate::prob::LOG_VAR_MIN, crate::prob::LOG_VAR_MAX)?;
            let nlv = g.neg(lv)?;
            let prec = g.exp(nlv)?;
            let fit = g.mul(prec, sse)?;
            let norm = g.add_scalar(lv, LN_2PI)?;
            let norm = g.scale(norm, count * spec.dim as f64)?;
            let total = g.add(norm, fit)?;
            let ll = g.scale(total, -0.5)?;
            recon[m] = Some((ll, r));
            let kl_e = kl_terms(g, q, fused)?;
            reg_enc[m] = Some(masked_total(g, kl_e, &masks[m])?);
        }

        // gated state update
        let u = g.concat(&slots, 1)?;
        let hu = g.concat(&[h_prev, u], 1)?;
        let wg = b.get(g, "transition.gate.w")?;
        let bg = b.get(g, "transition.gate.b")?;
        let wc = b.get(g, "transition.cand.w")?;
        let bc = b.get(g, "transition.cand.b")?;
        let gate = g.affine(hu, wg, bg)?;
        let gate = g.sigmoid(gate)?;
        let cand = g.affine(hu, wc, bc)?;
        let cand = g.tanh(cand)?;
        let delta = g.sub(cand, h_prev)?;
        let step = g.mul(gate, delta)?;
        let state = g.add(h_prev, step)?;

        Ok(StepVars {
            prior,
            experts,
            private,
            fused,
            z_shared,
            z_private,
            state,
            recon,
            kl_shared,
            kl_private,
            reg_enc,
        })
    }

    /// Noise of one episode in draw order: per step, the shared latent
    /// then every modality's private latent.
    pub fn episode_noise(&self, mode: NoiseMode, episode: u64) -> Vec<f64> {
        let l = &self.spec.latent;
        let per = l.shared_dim + if l.private { self.spec.modalities.len() * l.private_dim } else { 0 };
        match mode {
            NoiseMode::Zero => vec![0.0; self.spec.steps * per],
            NoiseMode::Constant(v) => vec![v; self.spec.steps * per],
            NoiseMode::Sampled { seed, epoch } => {
                let mut rng = substream(seed, Purpose::Noise, &[epoch, episode]);
                normals(&mut rng, self.spec.steps * per)
            }
        }
    }

    /// Unrolls the model over a chunk and sums the ELBO terms.
    pub fn sequence(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        batch: &SequenceBatch,
        noise: NoiseMode,
        include_task: bool,
    ) -> Result<SequenceTerms> {
        let l = &self.spec.latent;
        let (ds, dp, n) = (l.shared_dim, l.private_dim, batch.rows);
        let mcount = self.spec.modalities.len();
        let per = ds + if l.private { mcount * dp } else { 0 };
        let noise: Vec<Vec<f64>> = batch.episodes.iter().map(|&e| self.episode_noise(noise, e)).collect();

        let mut h = g.constant(Tensor::zeros(vec![n, l.state_dim]));
        let mut terms = SequenceTerms {
            recon: None,
            kl_shared: None,
            kl_private: None,
            reg_enc: None,
            task_ll: None,
            elbo: h,
            residuals: Vec::new(),
            fused_means: Vec::new(),
            states: vec![h],
        };
        for t in 0..batch.steps {
            let masks: Vec<Vec<bool>> = (0..mcount).map(|m| batch.step_mask(m, t)).collect();
            let xs: Vec<Option<Vec<f64>>> = (0..mcount)
                .map(|m| {
                    if masks[m].iter().any(|&p| p) {
                        batch.step_values(m, t)
                    } else {
                        None
                    }
                })
                .collect();
            let eps_s: Vec<f64> = noise.iter().flat_map(|v| v[t * per..t * per + ds].to_vec()).collect();
            let eps_p: Vec<Vec<f64>> = (0..mcount)
                .map(|m| {
                    if !l.private {
                        return Vec::new();
                    }
                    let off = t * per + ds + m * dp;
                    noise.iter().flat_map(|v| v[off..off + dp].to_vec()).collect()
                })
                .collect();
            let sv = self.step(g, b, h, &xs, &masks, &eps_s, &eps_p)?;
            accumulate(g, &mut terms.kl_shared, sv.kl_shared)?;
            for m in 0..mcount {
                if let Some((ll, r)) = sv.recon[m] {
                    accumulate(g, &mut terms.recon, ll)?;
                    terms.residuals.push(Residual {
                        t,
                        modality: m,
                        var: r,
                        rows: masks[m].clone(),
                    });
                }
                if let Some(k) = sv.kl_private[m] {
                    accumulate(g, &mut terms.kl_private, k)?;
                }
                if let Some(k) = sv.reg_enc[m] {
                    accumulate(g, &mut terms.reg_enc, k)?;
                }
            }
            terms.fused_means.push(sv.fused.mean);
            h = sv.state;
            terms.states.push(h);
        }

        if let Some(head) = self.head.as_ref().filter(|_| include_task) {
            let window = head.config.window_for(batch.steps)?;
            let c = self.aggregate_graph(g, &terms, window)?;
            let logits = task::head_logits(g, b, &head.config, c)?;
            let nll = task::nll_sum(g, logits, &batch.labels)?;
            terms.task_ll = Some(g.neg(nll)?);
        }

        let mut elbo = match terms.recon {
            Some(r) => r,
            None => g.scalar(0.0),
        };
        for k in [terms.kl_shared, terms.kl_private].into_iter().flatten() {
            elbo = g.sub(elbo, k)?;
        }
        if let Some(tl) = terms.task_ll {
            elbo = g.add(elbo, tl)?;
        }
        terms.elbo = elbo;
        Ok(terms)
    }

    /// `c = [z_{T-1-N}, ..., z_{T-1}, h_{T-2}]` from the fused means.
    pub fn aggregate_graph(&self, g: &mut Graph, terms: &SequenceTerms, window: usize) -> Result<Var> {
        let steps = terms.fused_means.len();
        if window + 1 > steps {
            return Err(Error::InvalidArgument(format!(
                "window of {window} past latents needs {} steps, episode has {steps}",
                window + 1
            )));
        }
        let mut parts: Vec<Var> = terms.fused_means[steps - 1 - window..].to_vec();
        parts.push(terms.states[steps - 1]);
        Ok(g.concat(&parts, 1)?)
    }

    /// Single-sample ELBO and its terms.
    pub fn elbo_sequence(&self, params: &ParamStore, batch: &SequenceBatch, noise: NoiseMode) -> Result<ElboReport> {
        if batch.rows != 1 {
            return Err(Error::InvalidArgument("elbo_sequence takes one episode".into()));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(params, &never_trainable);
        let terms = self.sequence(&mut g, &mut b, batch, noise, self.head.is_some())?;
        let val = |v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
        Ok(ElboReport {
            elbo: g.value(terms.elbo).item(),
            recon: val(terms.recon),
            kl_shared: val(terms.kl_shared),
            kl_private: val(terms.kl_private),
            task_ll: val(terms.task_ll),
        })
    }

    /// Posterior of one step for one sample. `x[m]` is the normalized
    /// input of modality `m`, ignored when `present[m]` is false.
    pub fn infer_step(
        &self,
        params: &ParamStore,
        x: &[Option<Vec<f64>>],
        present: &[bool],
        h_prev: &[f64],
        eps_shared: &[f64],
        eps_private: &[Vec<f64>],
    ) -> Result<StepPosterior> {
        let mcount = self.spec.modalities.len();
        if x.len() != mcount || present.len() != mcount {
            return Err(Error::Dimension(format!("expected {mcount} modalities")));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(params, &never_trainable);
        let h = g.constant(Tensor::new(vec![1, h_prev.len()], h_prev.to_vec())?);
        let xs: Vec<Option<Vec<f64>>> = (0..mcount)
            .map(|m| if present[m] { x[m].clone() } else { None })
            .collect();
        let masks: Vec<Vec<bool>> = present.iter().map(|&p| vec![p]).collect();
        let sv = self.step(&mut g, &mut b, h, &xs, &masks, eps_shared, eps_private)?;
        let row = |v: Var| g.value(v).data().to_vec();
        Ok(StepPosterior {
            prior: sv.prior.row(&g, 0),
            experts: sv.experts.iter().map(|e| e.map(|e| e.row(&g, 0))).collect(),
            fused: sv.fused.row(&g, 0),
            private: sv.private.iter().map(|e| e.map(|e| e.row(&g, 0))).collect(),
            z_shared: row(sv.z_shared),
            z_private: sv.z_private.iter().map(|z| z.map(row)).collect(),
            state: row(sv.state),
        })
    }

    /// Deterministic task-head inputs (posterior means, no sampling) for
    /// every row of `batch`.
    pub fn represent(
        &self,
        params: &ParamStore,
        batch: &SequenceBatch,
        window: usize,
        chunk_size: usize,
        exec: Exec,
    ) -> Result<Vec<Vec<f64>>> {
        let chunks = chunk_ranges(batch.rows, chunk_size);
        let out = map_indexed(exec, chunks.len(), |c| -> Result<Vec<Vec<f64>>> {
            let sub = batch.slice(chunks[c].clone());
            let mut g = Graph::new();
            let mut b = Binder::new(params, &never_trainable);
            let terms = self.sequence(&mut g, &mut b, &sub, NoiseMode::Zero, false)?;
            let cv = self.aggregate_graph(&mut g, &terms, window)?;
            let d = g.shape(cv)[1];
            Ok(g.value(cv).data().chunks_exact(d).map(|r| r.to_vec()).collect())
        });
        let mut rows = Vec::with_capacity(batch.rows);
        for r in out {
            rows.extend(r?);
        }
        Ok(rows)
    }

    /// Objective and gradient over a mini-batch:
    /// `-mean ELBO + l_enc R_enc + l_dec R_dec + l_u U`.
    ///
    /// Chunks are built first and kept alive so the decoder penalty can be
    /// pooled over the whole batch; its exact gradient with respect to the
    /// residuals is then injected into each chunk before backpropagation.
    pub fn objective(
        &self,
        params: &ParamStore,
        batch: &SequenceBatch,
        noise: NoiseMode,
        cfg: &ObjectiveConfig,
        trainable: &(dyn Fn(&str) -> bool + Sync),
        exec: Exec,
    ) -> Result<(ObjectiveReport, Grads)> {
        if batch.rows == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = batch.rows as f64;
        let mcount = self.spec.modalities.len();
        let enc_count: usize = (0..mcount)
            .filter(|&m| batch.x[m].is_some())
            .map(|m| batch.present[m].iter().filter(|&&p| p).count())
            .sum();
        let chunks = chunk_ranges(batch.rows, cfg.chunk_size);

        let states = map_indexed(exec, chunks.len(), |c| -> Result<ChunkState> {
            let sub = batch.slice(chunks[c].clone());
            let mut g = Graph::new();
            let mut b = Binder::new(params, trainable);
            let terms = self.sequence(&mut g, &mut b, &sub, noise, cfg.include_task)?;
            let elbo_sum = g.value(terms.elbo).item();
            let mut loss = g.scale(terms.elbo, -1.0 / n)?;
            let mut reg_enc_sum = 0.0;
            if let Some(r) = terms.reg_enc {
                reg_enc_sum = g.value(r).item();
                if cfg.lambda_enc != 0.0 {
                    let w = g.scale(r, cfg.lambda_enc / enc_count as f64)?;
                    loss = g.add(loss, w)?;
                }
            }
            let residuals = terms
                .residuals
                .iter()
                .map(|r| ResidualValue {
                    t: r.t,
                    modality: r.modality,
                    dim: g.shape(r.var)[1],
                    values: g.value(r.var).data().to_vec(),
                    rows: r.rows.clone(),
                })
                .collect();
            let vars = terms.residuals.iter().map(|r| r.var).collect();
            let bound = b.trainable_vars(&g);
            Ok(ChunkState {
                graph: g,
                loss,
                bound,
                residual_vars: vars,
                residuals,
                elbo_sum,
                reg_enc_sum,
            })
        });
        let states = states.into_iter().collect::<Result<Vec<_>>>()?;

        let views: Vec<&[ResidualValue]> = states.iter().map(|s| s.residuals.as_slice()).collect();
        let (reg_dec, mut dec_grads) = self.reg_dec_pooled(&views, cfg.lambda_dec != 0.0)?;

        let lambda_dec = cfg.lambda_dec;
        let injections: Vec<Vec<Option<Vec<f64>>>> = states
            .iter()
            .enumerate()
            .map(|(c, s)| (0..s.residuals.len()).map(|k| dec_grads.remove(&(c, k))).collect())
            .collect();
        let work: Vec<(ChunkState, Vec<Option<Vec<f64>>>)> = states.into_iter().zip(injections).collect();
        let mut elbo_sum = 0.0;
        let mut reg_enc_sum = 0.0;
        for (s, _) in &work {
            elbo_sum += s.elbo_sum;
            reg_enc_sum += s.reg_enc_sum;
        }
        let chunk_grads = map_owned(exec, work, |_, (mut st, inject)| -> Result<Vec<(usize, Vec<f64>)>> {
            let g = &mut st.graph;
            let mut loss = st.loss;
            for (k, gm) in inject.into_iter().enumerate() {
                let Some(gm) = gm else { continue };
                let var = st.residual_vars[k];
                let shape = g.shape(var).to_vec();
                let gv = g.constant(Tensor::new(shape, gm)?);
                let p = g.mul(gv, var)?;
                let s = g.sum(p)?;
                let s = g.scale(s, lambda_dec)?;
                loss = g.add(loss, s)?;
            }
            if st.bound.is_empty() {
                return Ok(Vec::new());
            }
            g.backward(loss)?;
            Ok(st
                .bound
                .iter()
                .map(|&(i, v)| (i, g.grad(v).expect("trainable leaf").data().to_vec()))
                .collect())
        });

        let mut grads: Grads = vec![None; params.len()];
        for cg in chunk_grads {
            for (i, gv) in cg? {
                add_into(&mut grads[i], &gv);
            }
        }

        let mut unitarity = 0.0;
        for m in 0..mcount {
            if self.frontends[m].is_none() || batch.x[m].is_none() {
                continue;
            }
            let (p, pg) = self.unitarity(params, m, trainable)?;
            unitarity += p;
            if cfg.lambda_u != 0.0 {
                for (i, gv) in pg {
                    let scaled: Vec<f64> = gv.iter().map(|v| v * cfg.lambda_u).collect();
                    add_into(&mut grads[i], &scaled);
                }
            }
        }

        let elbo = elbo_sum / n;
        let reg_enc = if enc_count > 0 { reg_enc_sum / enc_count as f64 } else { 0.0 };
        let objective = -elbo + cfg.lambda_enc * reg_enc + cfg.lambda_dec * reg_dec + cfg.lambda_u * unitarity;
        let report = ObjectiveReport {
            elbo,
            reg_enc,
            reg_dec,
            unitarity,
            objective,
        };
        if !objective.is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        Ok((report, grads))
    }

    /// Unitarity penalty of the radar frontend of `m` and its gradient.
    pub fn unitarity(
        &self,
        params: &ParamStore,
        m: usize,
        trainable: &(dyn Fn(&str) -> bool + Sync),
    ) -> Result<(f64, Vec<(usize, Vec<f64>)>)> {
        let fe = self.frontends[m]
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no frontend", self.spec.modalities[m].name)))?;
        let mut g = Graph::new();
        let mut b = Binder::new(params, trainable);
        let fv = self.frontend_vars(&mut g, &mut b, m)?;
        let p = fe.unitarity_penalty(&mut g, &fv)?;
        let value = g.value(p).item();
        let bound = b.trainable_vars(&g);
        if bound.is_empty() {
            return Ok((value, Vec::new()));
        }
        g.backward(p)?;
        let grads = bound
            .into_iter()
            .map(|(i, v)| (i, g.grad(v).expect("trainable leaf").data().to_vec()))
            .collect();
        Ok((value, grads))
    }

    /// Decoder cross-covariance penalty over residuals pooled across chunks
    /// and steps. Returns the value and, when asked, the gradient with
    /// respect to each residual keyed by `(chunk, residual index)`.
    fn reg_dec_pooled(
        &self,
        chunks: &[&[ResidualValue]],
        with_grad: bool,
    ) -> Result<(f64, HashMap<(usize, usize), Vec<f64>>)> {
        let mcount = self.spec.modalities.len();
        let mut total = 0.0;
        let mut grads: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        let projections: Vec<Option<Projection>> = self
            .spec
            .modalities
            .iter()
            .map(|m| {
                let d = m.dim;
                (d > REG_DEC_MAX_DIM).then(|| Projection::new(&m.name, d, REG_DEC_MAX_DIM))
            })
            .collect();
        for ma in 0..mcount {
            for mb in ma + 1..mcount {
                // (chunk, residual a, residual b, local row)
                let mut rows = Vec::new();
                for (c, res) in chunks.iter().enumerate() {
                    for (ka, ra) in res.iter().enumerate().filter(|(_, r)| r.modality == ma) {
                        let Some(kb) = res.iter().position(|r| r.modality == mb && r.t == ra.t) else {
                            continue;
                        };
                        let rb = &res[kb];
                        for i in 0..ra.rows.len() {
                            if ra.rows[i] && rb.rows[i] {
                                rows.push((c, ka, kb, i));
                            }
                        }
                    }
                }
                if rows.len() < 2 {
                    continue;
                }
                let take = |m: usize, k: &dyn Fn(&(usize, usize, usize, usize)) -> usize| -> (Vec<f64>, usize) {
                    let mut out = Vec::new();
                    let mut dim = 0;
                    for row in &rows {
                        let r = &chunks[row.0][k(row)];
                        dim = r.dim;
                        let raw = &r.values[row.3 * r.dim..(row.3 + 1) * r.dim];
                        match &projections[m] {
                            Some(p) => out.extend(p.apply(raw)),
                            None => out.extend_from_slice(raw),
                        }
                    }
                    let d = projections[m].as_ref().map(|p| p.rows).unwrap_or(dim);
                    (out, d)
                };
                let (a, da) = take(ma, &|r| r.1);
                let (bv, db) = take(mb, &|r| r.2);
                let (p, ga, gb) = cross_cov_penalty(&a, &bv, rows.len(), da, db, with_grad)?;
                total += p;
                if !with_grad {
                    continue;
                }
                for (j, row) in rows.iter().enumerate() {
                    for (m, k, g, d) in [(ma, row.1, &ga, da), (mb, row.2, &gb, db)] {
                        let r = &chunks[row.0][k];
                        let gr = &g[j * d..(j + 1) * d];
                        let back = match &projections[m] {
                            Some(p) => p.transpose_apply(gr),
                            None => gr.to_vec(),
                        };
                        let slot = grads
                            .entry((row.0, k))
                            .or_insert_with(|| vec![0.0; r.values.len()]);
                        for (s, v) in slot[row.3 * r.dim..(row.3 + 1) * r.dim].iter_mut().zip(back) {
                            *s += v;
                        }
                    }
                }
            }
        }
        Ok((total, grads))
    }

    /// Decoder penalty of `batch` under `noise`, without gradients.
    pub fn reg_dec(&self, params: &ParamStore, batch: &SequenceBatch, noise: NoiseMode) -> Result<f64> {
        if batch.rows < 2 {
            return Err(Error::InvalidArgument("decoder penalty needs at least two samples".into()));
        }
        let mut g = Graph::new();
        let mut b = Binder::new(params, &never_trainable);
        let terms = self.sequence(&mut g, &mut b, batch, noise, false)?;
        let res: Vec<ResidualValue> = terms
            .residuals
            .iter()
            .map(|r| ResidualValue {
                t: r.t,
                modality: r.modality,
                dim: g.shape(r.var)[1],
                values: g.value(r.var).data().to_vec(),
                rows: r.rows.clone(),
            })
            .collect();
        Ok(self.reg_dec_pooled(&[&res], false)?.0)
    }
}

struct ResidualValue {
    t: usize,
    modality: usize,
    dim: usize,
    values: Vec<f64>,
    rows: Vec<bool>,
}

struct ChunkState {
    graph: Graph,
    loss: Var,
    bound: Vec<(usize, Var)>,
    residual_vars: Vec<Var>,
    residuals: Vec<ResidualValue>,
    elbo_sum: f64,
    reg_enc_sum: f64,
}

/// Fixed random sign projection to a narrower space.
pub struct Projection {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Projection {
    pub fn new(name: &str, cols: usize, rows: usize) -> Self {
        use rand::Rng;
        let mut rng = substream(PROJECTION_SEED, Purpose::Projection, &[fnv1a(name)]);
        let s = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| if rng.gen::<bool>() { s } else { -s }).collect();
        Self { rows, cols, data }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| {
                let r = &self.data[i * self.cols..(i + 1) * self.cols];
                r.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn transpose_apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            let r = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(r) {
                *o += a * yi;
            }
        }
        out
    }
}

/// `||Cov(a, b)||_F^2` with the unbiased estimator over `n` rows of
/// `a: [n, da]` and `b: [n, db]`, and optionally its row gradients.
pub fn cross_cov_penalty(
    a: &[f64],
    b: &[f64],
    n: usize,
    da: usize,
    db: usize,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if n < 2 {
        return Err(Error::InvalidArgument("covariance needs at least two samples".into()));
    }
    if a.len() != n * da || b.len() != n * db {
        return Err(Error::Dimension("cross-covariance input sizes".into()));
    }
    let mean = |x: &[f64], d: usize| -> Vec<f64> {
        let mut mu = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for (m, v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        mu.iter().map(|m| m / n as f64).collect()
    };
    let (ma, mb) = (mean(a, da), mean(b, db));
    let ca: Vec<f64> = a.iter().enumerate().map(|(i, v)| v - ma[i % da]).collect();
    let cb: Vec<f64> = b.iter().enumerate().map(|(i, v)| v - mb[i % db]).collect();
    let scale = 1.0 / (n as f64 - 1.0);
    let mut cov = vec![0.0; da * db];
    for k in 0..n {
        let ra = &ca[k * da..(k + 1) * da];
        let rb = &cb[k * db..(k + 1) * db];
        for i in 0..da {
            for j in 0..db {
                cov[i * db + j] += ra[i] * rb[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c *= scale);
    let value = cov.iter().map(|c| c * c).sum();
    if !with_grad {
        return Ok((value, Vec::new(), Vec::new()));
    }
    let mut ga = vec![0.0; n * da];
    let mut gb = vec![0.0; n * db];
    for k in 0..n {
        let ra = &ca[k * da..(k + 1) * da];
        let rb = &cb[k * db..(k + 1) * db];
        for i in 0..da {
            for j in 0..db {
                let c = 2.0 * scale * cov[i * db + j];
                ga[k * da + i] += c * rb[j];
                gb[k * db + j] += c * ra[i];
            }
        }
    }
    Ok((value, ga, gb))
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

pub fn chunk_ranges(rows: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..rows.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(rows))
        .collect()
}
