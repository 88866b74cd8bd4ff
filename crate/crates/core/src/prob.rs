//! Diagonal Gaussians: densities, sampling, KL and weighted products.
//!
//! [`DiagGaussian`] is a plain value type used by tests, evaluation and
//! the closed-form oracles. [`GaussVar`] carries the same quantities as
//! rows of graph variables so the training objective can differentiate
//! through them; the two paths are cross-checked in tests.

use vibeam_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension(format!("{what}: expected {expected}, got {got}")));
    }
    Ok(())
}

impl DiagGaussian {
    /// Clamps `log_var` into [-20, 20].
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_dim("log_var", mean.len(), log_var.len())?;
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_dim("log_prob input", self.dim(), x.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), x)| -0.5 * (LN_2PI + lv + (x - m).powi(2) * (-lv).exp()))
            .sum())
    }

    /// Reparameterized draw `mean + exp(log_var / 2) * noise`.
    pub fn sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        check_dim("noise", self.dim(), noise.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }
}

/// Closed-form KL(q || p).
pub fn kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim("kl", q.dim(), p.dim())?;
    let mut total = 0.0;
    for i in 0..q.dim() {
        let (lq, lp) = (q.log_var[i], p.log_var[i]);
        let d = q.mean[i] - p.mean[i];
        total += 0.5 * ((lq.exp() + d * d) / lp.exp() - 1.0 + (lp - lq));
    }
    Ok(total)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Unconstrained value whose softplus is one.
pub fn softplus_inverse_of_one() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Reliability exponents of the product of experts, `alpha = softplus(raw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoEWeights {
    pub raw: Vec<f64>,
}

impl PoEWeights {
    /// All weights equal to one.
    pub fn unit(experts: usize) -> Self {
        Self {
            raw: vec![softplus_inverse_of_one(); experts],
        }
    }

    pub fn from_alphas(alphas: &[f64]) -> Result<Self> {
        let raw = alphas
            .iter()
            .map(|&a| {
                if a > 0.0 {
                    Ok(a + (-(-a).exp_m1()).ln())
                } else {
                    Err(Error::InvalidArgument(format!("alpha {a} must be positive")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { raw })
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| softplus(r)).collect()
    }
}

/// Weighted product of the prior with the present experts.
///
/// Precision `prior + sum alpha_m * expert_m`; with no expert present the
/// prior is returned unchanged.
pub fn poe_fuse(
    prior: &DiagGaussian,
    experts: &[DiagGaussian],
    weights: &PoEWeights,
    present: &[bool],
) -> Result<DiagGaussian> {
    if prior.dim() == 0 {
        return Err(Error::InvalidArgument("empty prior".into()));
    }
    check_dim("poe weights", experts.len(), weights.raw.len())?;
    check_dim("poe mask", experts.len(), present.len())?;
    for e in experts {
        check_dim("poe expert", prior.dim(), e.dim())?;
    }
    if !present.iter().any(|&p| p) {
        return Ok(prior.clone());
    }
    let alphas = weights.alphas();
    let d = prior.dim();
    let mut mean = Vec::with_capacity(d);
    let mut log_var = Vec::with_capacity(d);
    for i in 0..d {
        let lam0 = (-prior.log_var[i]).exp();
        let mut lam = lam0;
        let mut num = lam0 * prior.mean[i];
        for (k, e) in experts.iter().enumerate() {
            if present[k] {
                let l = alphas[k] * (-e.log_var[i]).exp();
                lam += l;
                num += l * e.mean[i];
            }
        }
        mean.push(num / lam);
        log_var.push(-lam.ln());
    }
    DiagGaussian::new(mean, log_var)
}

/// Batched Gaussian in a graph: `mean` and `log_var` are `[n, d]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussVar {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussVar {
    /// Splits a `[n, 2d]` network output into mean and clamped log-variance.
    pub fn from_output(g: &mut Graph, out: Var, d: usize) -> Result<Self> {
        let mean = g.slice(out, 1, 0, d)?;
        let lv = g.slice(out, 1, d, d)?;
        let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(Self { mean, log_var })
    }

    pub fn constant(g: &mut Graph, rows: &[DiagGaussian]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.dim()).unwrap_or(0);
        let mut m = Vec::with_capacity(n * d);
        let mut l = Vec::with_capacity(n * d);
        for r in rows {
            check_dim("gaussian rows", d, r.dim())?;
            m.extend_from_slice(r.mean());
            l.extend_from_slice(r.log_var());
        }
        Ok(Self {
            mean: g.constant(Tensor::new(vec![n, d], m)?),
            log_var: g.constant(Tensor::new(vec![n, d], l)?),
        })
    }

    /// Row `i` as a value-type Gaussian.
    pub fn row(&self, g: &Graph, i: usize) -> DiagGaussian {
        let d = g.shape(self.mean)[1];
        let m = g.value(self.mean).data()[i * d..(i + 1) * d].to_vec();
        let l = g.value(self.log_var).data()[i * d..(i + 1) * d].to_vec();
        DiagGaussian { mean: m, log_var: l }
    }

    pub fn sample(&self, g: &mut Graph, noise: Var) -> Result<Var> {
        let half = g.scale(self.log_var, 0.5)?;
        let sd = g.exp(half)?;
        let e = g.mul(sd, noise)?;
        Ok(g.add(self.mean, e)?)
    }
}

/// Elementwise KL(q || p) terms, `[n, d]`; summing a row gives that row's KL.
pub fn kl_terms(g: &mut Graph, q: GaussVar, p: GaussVar) -> Result<Var> {
    let vq = g.exp(q.log_var)?;
    let vp = g.exp(p.log_var)?;
    let d = g.sub(q.mean, p.mean)?;
    let d2 = g.square(d)?;
    let num = g.add(vq, d2)?;
    let ratio = g.div(num, vp)?;
    let r1 = g.add_scalar(ratio, -1.0)?;
    let a = g.add(r1, p.log_var)?;
    let b = g.sub(a, q.log_var)?;
    Ok(g.scale(b, 0.5)?)
}

/// One PoE factor: an expert, its scalar weight and a `[n, d]` constant
/// presence mask (rows of ones or zeros).
pub struct Expert {
    pub dist: GaussVar,
    pub alpha: Var,
    pub mask: Var,
}

pub fn poe_graph(g: &mut Graph, prior: GaussVar, experts: &[Expert]) -> Result<GaussVar> {
    if experts.is_empty() {
        return Ok(prior);
    }
    let nl = g.neg(prior.log_var)?;
    let mut lam = g.exp(nl)?;
    let mut num = g.mul(lam, prior.mean)?;
    for e in experts {
        let nl = g.neg(e.dist.log_var)?;
        let l = g.exp(nl)?;
        let l = g.mul(l, e.alpha)?;
        let l = g.mul(l, e.mask)?;
        let contrib = g.mul(l, e.dist.mean)?;
        lam = g.add(lam, l)?;
        num = g.add(num, contrib)?;
    }
    let mean = g.div(num, lam)?;
    let ll = g.log(lam)?;
    let lv = g.neg(ll)?;
    let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok(GaussVar { mean, log_var })
}
