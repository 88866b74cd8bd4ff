//! Finite-difference gradient checking.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, scaled by `max(1, |x|)`.
    pub step: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is near zero are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-5,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error for each input.
    pub max_rel_error: Vec<f64>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor], as_params: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if as_params {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(AutodiffError::NotScalar(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of the scalar function `f` with
/// central differences at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut num = vec![0.0; input.numel()];
        let mut worst = 0.0f64;
        for j in 0..input.numel() {
            let x = input.data()[j];
            let h = opts.step * x.abs().max(1.0);
            probe[k].data_mut()[j] = x + h;
            let plus = evaluate(&f, &probe, false)?;
            let fp = plus.0.value(plus.2).item();
            probe[k].data_mut()[j] = x - h;
            let minus = evaluate(&f, &probe, false)?;
            let fm = minus.0.value(minus.2).item();
            probe[k].data_mut()[j] = x;
            let d = (fp - fm) / (2.0 * h);
            if !d.is_finite() {
                return Err(AutodiffError::NonFinite { op: "grad_check" });
            }
            num[j] = d;
            worst = worst.max(relative_error(analytic[k].data()[j], d, opts.floor));
        }
        numeric.push(Tensor::new(input.shape().to_vec(), num)?);
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|&e| e <= opts.tol);
    Ok(GradCheckReport {
        max_rel_error,
        analytic,
        numeric,
        passed,
    })
}
