mod support {
    pub mod primitive_cases;
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::primitive_cases::{cases, mlp3, mlp3_inputs, weighted_sum};
use vibeam_autodiff::{gelu, grad_check, GradCheckOptions, Graph, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    let start = std::time::Instant::now();
    let opts = GradCheckOptions::default();
    for seed in 0..100 {
        for case in cases(seed) {
            let report = grad_check(&case.f, &case.inputs, opts).unwrap();
            assert!(
                report.passed,
                "{} seed {seed}: worst rel error {:e}",
                case.name,
                report.worst()
            );
        }
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn sum_of_squares_is_tight() {
    let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
    let report = grad_check(
        |g, v| {
            let s = g.square(v[0])?;
            g.sum(s)
        },
        &[x],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.worst() <= 1e-7, "{}", report.worst());
}

#[test]
fn constant_function_has_zero_gradients() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let report = grad_check(
        |g, _| Ok(g.scalar(4.0)),
        &[x],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.analytic[0].data().iter().all(|&d| d == 0.0));
    assert!(report.numeric[0].data().iter().all(|&d| d == 0.0));
}

#[test]
fn gelu_matmul_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = mlp3_inputs(&mut rng);
    let report = grad_check(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, v[3])?;
            let h = g.gelu(h)?;
            weighted_sum(g, h)
        },
        &inputs[..4],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.worst() <= 1e-5, "{}", report.worst());
}

#[test]
fn non_finite_probe_is_an_error() {
    // log near zero: the minus probe crosses into the negative domain
    let x = Tensor::vector(vec![1e-5]);
    let r = grad_check(|g, v| {
        let y = g.log(v[0])?;
        g.sum(y)
    }, &[x], GradCheckOptions::default());
    assert!(r.is_err());
}

/// Standard normal CDF by composite Simpson quadrature of the density,
/// independent of the erf used by the engine.
fn phi_quadrature(x: f64) -> f64 {
    let lo = -12.0;
    let n = 200_000;
    let h = (x - lo) / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * pdf(lo + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn gelu_matches_quadrature_reference() {
    for x in [-2.0, 0.0, 2.0] {
        let reference = x * phi_quadrature(x);
        assert!((gelu(x) - reference).abs() < 1e-12, "x={x}");
        let mut g = Graph::new();
        let v = g.scalar(x);
        let y = g.gelu(v).unwrap();
        assert_eq!(g.value(y).item(), gelu(x));
    }
}

#[test]
fn mlp_gradients_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = mlp3_inputs(&mut rng);
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.into_iter().map(|t| g.param(t)).collect();
        let loss = mlp3(&mut g, &vars).unwrap();
        g.backward(loss).unwrap();
        let mut bits = vec![g.value(loss).item().to_bits()];
        for v in vars {
            bits.extend(g.grad(v).unwrap().data().iter().map(|x| x.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

fn tensor_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #[test]
    fn backward_is_linear_in_the_loss(
        x in tensor_strategy(6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let grads = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let xv = g.param(Tensor::new(vec![2, 3], x.clone()).unwrap());
            let l1 = {
                let t = g.tanh(xv).unwrap();
                g.sum(t).unwrap()
            };
            let l2 = {
                let s = g.square(xv).unwrap();
                weighted_sum(&mut g, s).unwrap()
            };
            let p1 = g.scale(l1, ca).unwrap();
            let p2 = g.scale(l2, cb).unwrap();
            let loss = g.add(p1, p2).unwrap();
            g.backward(loss).unwrap();
            g.grad(xv).unwrap().data().to_vec()
        };
        let combined = grads(a, b);
        let g1 = grads(1.0, 0.0);
        let g2 = grads(0.0, 1.0);
        for i in 0..6 {
            let expect = a * g1[i] + b * g2[i];
            prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn shared_operand_accumulates(x in tensor_strategy(4)) {
        // x * x must give 2x, exercising accumulation into one parent
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(x.clone()));
        let y = g.mul(v, v).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        for (gx, xi) in g.grad(v).unwrap().data().iter().zip(&x) {
            prop_assert_eq!(*gx, 2.0 * xi);
        }
    }
}
