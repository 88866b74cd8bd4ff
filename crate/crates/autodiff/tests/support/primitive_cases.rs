// Randomized finite-difference cases, one per primitive plus a small MLP.
// Shared by the crate's gradient tests and the workspace acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vibeam_autodiff::{Graph, Result, Tensor, Var};

pub type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero in magnitude.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.5..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `y` to a scalar with fixed, non-uniform weights so every
/// output element gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7311 + 0.3).sin() + 0.5).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn unary(
    name: &'static str,
    x: Tensor,
    op: fn(&mut Graph, Var) -> Result<Var>,
) -> Case {
    Case {
        name,
        inputs: vec![x],
        f: Box::new(move |g, v| {
            let y = op(g, v[0])?;
            weighted_sum(g, y)
        }),
    }
}

fn binary(
    name: &'static str,
    a: Tensor,
    b: Tensor,
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Case {
    Case {
        name,
        inputs: vec![a, b],
        f: Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            weighted_sum(g, y)
        }),
    }
}

pub fn mlp3(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let h1 = g.affine(v[0], v[1], v[2])?;
    let h1 = g.tanh(h1)?;
    let h2 = g.affine(h1, v[3], v[4])?;
    let h2 = g.gelu(h2)?;
    let out = g.affine(h2, v[5], v[6])?;
    let sq = g.square(out)?;
    g.mean(sq)
}

pub fn mlp3_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        uniform(rng, &[4, 5], -1.0, 1.0),
        uniform(rng, &[5, 6], -0.8, 0.8),
        uniform(rng, &[6], -0.2, 0.2),
        uniform(rng, &[6, 6], -0.8, 0.8),
        uniform(rng, &[6], -0.2, 0.2),
        uniform(rng, &[6, 3], -0.8, 0.8),
        uniform(rng, &[3], -0.2, 0.2),
    ]
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = vec![
        binary("add", uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0), Graph::add),
        binary("sub", uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0), Graph::sub),
        binary("mul", uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0), Graph::mul),
        binary("div", uniform(r, &[3, 4], -2.0, 2.0), away_from_zero(r, &[3, 4]), Graph::div),
        binary("mul-scalar", uniform(r, &[5], -2.0, 2.0), uniform(r, &[], -2.0, 2.0), Graph::mul),
        binary("div-scalar", uniform(r, &[], -2.0, 2.0), away_from_zero(r, &[4]), Graph::div),
        binary("matmul", uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0), Graph::matmul),
        binary(
            "complex_matmul",
            uniform(r, &[2, 3, 4], -1.0, 1.0),
            uniform(r, &[2, 4, 2], -1.0, 1.0),
            Graph::complex_matmul,
        ),
        unary("transpose", uniform(r, &[3, 4], -2.0, 2.0), Graph::transpose),
        unary("conj_transpose", uniform(r, &[2, 3, 2], -2.0, 2.0), Graph::conj_transpose),
        unary("sum", uniform(r, &[3, 4], -2.0, 2.0), Graph::sum),
        unary("mean", uniform(r, &[3, 4], -2.0, 2.0), Graph::mean),
        unary("exp", uniform(r, &[6], -2.0, 2.0), Graph::exp),
        unary("log", uniform(r, &[6], 0.2, 3.0), Graph::log),
        unary("softplus", uniform(r, &[6], -4.0, 4.0), Graph::softplus),
        unary("tanh", uniform(r, &[6], -2.0, 2.0), Graph::tanh),
        unary("sigmoid", uniform(r, &[6], -4.0, 4.0), Graph::sigmoid),
        unary("gelu", uniform(r, &[6], -3.0, 3.0), Graph::gelu),
        unary("square", uniform(r, &[6], -2.0, 2.0), Graph::square),
        unary("sqrt", uniform(r, &[6], 0.2, 3.0), Graph::sqrt),
        unary("neg", uniform(r, &[6], -2.0, 2.0), Graph::neg),
    ];
    let c: f64 = r.gen_range(-2.0..2.0);
    out.push(Case {
        name: "scale",
        inputs: vec![uniform(r, &[6], -2.0, 2.0)],
        f: Box::new(move |g, v| {
            let y = g.scale(v[0], c)?;
            weighted_sum(g, y)
        }),
    });
    out.push(Case {
        name: "add_scalar",
        inputs: vec![uniform(r, &[6], -2.0, 2.0)],
        f: Box::new(move |g, v| {
            let y = g.add_scalar(v[0], c)?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
    });
    // keep probes clear of the clamp kinks at +-1
    let clamp_in: Vec<f64> = (0..8)
        .map(|i| {
            let m = if i % 2 == 0 { r.gen_range(0.0..0.9) } else { r.gen_range(1.1..2.0) };
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    out.push(Case {
        name: "clamp",
        inputs: vec![Tensor::vector(clamp_in)],
        f: Box::new(|g, v| {
            let y = g.clamp(v[0], -1.0, 1.0)?;
            let y = g.square(y)?;
            weighted_sum(g, y)
        }),
    });
    out.push(Case {
        name: "affine",
        inputs: vec![
            uniform(r, &[3, 4], -1.0, 1.0),
            uniform(r, &[4, 2], -1.0, 1.0),
            uniform(r, &[2], -1.0, 1.0),
        ],
        f: Box::new(|g, v| {
            let y = g.affine(v[0], v[1], v[2])?;
            weighted_sum(g, y)
        }),
    });
    out.push(Case {
        name: "permute",
        inputs: vec![uniform(r, &[2, 3, 4], -2.0, 2.0)],
        f: Box::new(|g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            weighted_sum(g, y)
        }),
    });
    out.push(Case {
        name: "reshape",
        inputs: vec![uniform(r, &[2, 6], -2.0, 2.0)],
        f: Box::new(|g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            weighted_sum(g, y)
        }),
    });
    out.push(Case {
        name: "concat",
        inputs: vec![uniform(r, &[2, 3, 2], -2.0, 2.0), uniform(r, &[2, 1, 2], -2.0, 2.0)],
        f: Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            weighted_sum(g, y)
        }),
    });
    out.push(Case {
        name: "slice",
        inputs: vec![uniform(r, &[3, 5, 2], -2.0, 2.0)],
        f: Box::new(|g, v| {
            let y = g.slice(v[0], 1, 1, 3)?;
            weighted_sum(g, y)
        }),
    });
    out.push(Case {
        name: "mlp3",
        inputs: mlp3_inputs(r),
        f: Box::new(mlp3),
    });
    out
}
