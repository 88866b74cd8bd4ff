//! Tape of primitive operations and the reverse sweep over it.
//!
//! Nodes are appended in creation order, so creation order is a valid
//! topological order and `backward` is a single reverse pass. Binary
//! elementwise ops accept equal shapes, or one operand holding a single
//! value; nothing else broadcasts.

use crate::error::{AutodiffError, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `[n, k] x [k, m]`
    MatMul,
    /// `x[n, k] * w[k, m] + b[m]` with the bias repeated on every row.
    Affine,
    /// 2-D transpose.
    Transpose,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum,
    Mean,
    Exp,
    Log,
    Softplus,
    Tanh,
    Sigmoid,
    Gelu,
    Square,
    Sqrt,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Complex matmul on `[2, r, k] x [2, k, c]`, axis 0 holding (re, im).
    ComplexMatMul,
    /// Conjugate transpose of a `[2, r, c]` complex matrix.
    ConjTranspose,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Affine => "affine",
            OpKind::Transpose => "transpose",
            OpKind::Permute(_) => "permute",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Clamp { .. } => "clamp",
            OpKind::ComplexMatMul => "complex_matmul",
            OpKind::ConjTranspose => "conj_transpose",
        }
    }

    /// Number of operands, `None` for variadic kinds.
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::ComplexMatMul => Some(2),
            OpKind::Affine => Some(3),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Param,
    Constant,
    Op(OpKind),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    kind: NodeKind,
    parents: Vec<Var>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Single-owner computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, NodeKind::Param, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, NodeKind::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&mut self, value: Tensor, kind: NodeKind, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            parents: Vec::new(),
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears stored gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.consumed = false;
    }

    pub fn apply(&mut self, kind: OpKind, operands: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if operands.len() != n {
                return Err(AutodiffError::InvalidArgument {
                    op: kind.name(),
                    reason: format!("expected {n} operands, got {}", operands.len()),
                });
            }
        } else if operands.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: kind.name(),
                reason: "no operands".into(),
            });
        }
        if operands.iter().any(|v| v.0 >= self.nodes.len()) {
            return Err(AutodiffError::UnknownVar);
        }
        let value = {
            let vals: Vec<&Tensor> = operands.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&kind, &vals)?
        };
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: kind.name() });
        }
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            kind: NodeKind::Op(kind),
            parents: operands.to_vec(),
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss. Every parameter leaf ends up with
    /// a gradient, zero when the loss does not depend on it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownVar);
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        if !lv.all_finite() {
            return Err(AutodiffError::NonFinite { op: "backward" });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.kind {
                NodeKind::Param => leaf_grads.push((i, g)),
                NodeKind::Constant => {}
                NodeKind::Op(kind) => propagate(&self.nodes, i, kind, &g, &mut grads),
            }
        }
        for (i, g) in leaf_grads {
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::from_parts(shape, g));
        }
        for node in &mut self.nodes {
            if matches!(node.kind, NodeKind::Param) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        self.consumed = true;
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Affine, &[x, w, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(OpKind::Permute(axes.to_vec()), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, len }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softplus, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Gelu, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sqrt, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Neg, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::AddScalar(c), &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn complex_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::ComplexMatMul, &[a, b])
    }
    pub fn conj_transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::ConjTranspose, &[a])
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn binary_shape(op: &OpKind, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op: op.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn mismatch(op: &OpKind, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn permuted_shape(op: &OpKind, shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(AutodiffError::InvalidArgument {
            op: op.name(),
            reason: format!("axes {axes:?} do not match rank of {shape:?}"),
        });
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(AutodiffError::InvalidArgument {
                op: op.name(),
                reason: format!("axes {axes:?} are not a permutation"),
            });
        }
        seen[a] = true;
    }
    Ok(axes.iter().map(|&a| shape[a]).collect())
}

/// Calls `f(out_index, in_offset)` for every element of the permuted view.
fn for_each_permuted(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let pstrides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for out_i in 0..total {
        f(out_i, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += pstrides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= pstrides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn check_complex(op: &OpKind, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [2, r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::InvalidArgument {
            op: op.name(),
            reason: format!("expected a [2, r, c] complex matrix, got {s:?}"),
        }),
    }
}

fn forward(kind: &OpKind, v: &[&Tensor]) -> Result<Tensor> {
    use OpKind::*;
    Ok(match kind {
        Add | Sub | Mul | Div => {
            let (a, b) = (v[0], v[1]);
            let shape = binary_shape(kind, a, b)?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|i| {
                    let (x, y) = (at(a, i), at(b, i));
                    match kind {
                        Add => x + y,
                        Sub => x - y,
                        Mul => x * y,
                        _ => x / y,
                    }
                })
                .collect();
            Tensor::from_parts(shape, data)
        }
        MatMul => {
            let (a, b) = (v[0], v[1]);
            match (a.shape(), b.shape()) {
                ([n, k], [k2, m]) if k == k2 => {
                    let mut out = vec![0.0; n * m];
                    gemm_nn(a.data(), b.data(), &mut out, *n, *k, *m);
                    Tensor::from_parts(vec![*n, *m], out)
                }
                _ => return Err(mismatch(kind, a, b)),
            }
        }
        Affine => {
            let (x, w, b) = (v[0], v[1], v[2]);
            match (x.shape(), w.shape(), b.shape()) {
                ([n, k], [k2, m], [m2]) if k == k2 && m == m2 => {
                    let mut out = Vec::with_capacity(n * m);
                    for _ in 0..*n {
                        out.extend_from_slice(b.data());
                    }
                    gemm_nn(x.data(), w.data(), &mut out, *n, *k, *m);
                    Tensor::from_parts(vec![*n, *m], out)
                }
                ([_, _], [_, _], _) => return Err(mismatch(kind, w, b)),
                _ => return Err(mismatch(kind, x, w)),
            }
        }
        Transpose => {
            let a = v[0];
            if a.shape().len() != 2 {
                return Err(AutodiffError::InvalidArgument {
                    op: kind.name(),
                    reason: format!("expected a matrix, got {:?}", a.shape()),
                });
            }
            permute_forward(a, &[1, 0])
        }
        Permute(axes) => {
            permuted_shape(kind, v[0].shape(), axes)?;
            permute_forward(v[0], axes)
        }
        Reshape(shape) => v[0].clone().reshaped(shape.clone())?,
        Concat { axis } => {
            let first = v[0];
            let rank = first.shape().len();
            if *axis >= rank {
                return Err(AutodiffError::InvalidArgument {
                    op: kind.name(),
                    reason: format!("axis {axis} out of range for {:?}", first.shape()),
                });
            }
            let mut total = 0;
            for t in v {
                let ok = t.shape().len() == rank
                    && (0..rank).all(|d| d == *axis || t.shape()[d] == first.shape()[d]);
                if !ok {
                    return Err(mismatch(kind, first, t));
                }
                total += t.shape()[*axis];
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            let (outer, inner) = outer_inner(&shape, *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in v {
                    let block = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_parts(shape, data)
        }
        Slice { axis, start, len } => {
            let a = v[0];
            if *axis >= a.shape().len() || *len == 0 || start + len > a.shape()[*axis] {
                return Err(AutodiffError::InvalidArgument {
                    op: kind.name(),
                    reason: format!(
                        "range {start}..{} on axis {axis} of {:?}",
                        start + len,
                        a.shape()
                    ),
                });
            }
            let (outer, inner) = outer_inner(a.shape(), *axis);
            let full = a.shape()[*axis] * inner;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * full + start * inner;
                data.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            Tensor::from_parts(shape, data)
        }
        Sum => Tensor::scalar(v[0].data().iter().sum()),
        Mean => Tensor::scalar(v[0].data().iter().sum::<f64>() / v[0].numel() as f64),
        Exp => unary(v[0], f64::exp),
        Log => unary(v[0], f64::ln),
        Softplus => unary(v[0], softplus_scalar),
        Tanh => unary(v[0], f64::tanh),
        Sigmoid => unary(v[0], sigmoid_scalar),
        Gelu => unary(v[0], gelu_scalar),
        Square => unary(v[0], |x| x * x),
        Sqrt => unary(v[0], f64::sqrt),
        Neg => unary(v[0], |x| -x),
        Scale(c) => unary(v[0], |x| c * x),
        AddScalar(c) => unary(v[0], |x| x + c),
        Clamp { lo, hi } => {
            if lo > hi {
                return Err(AutodiffError::InvalidArgument {
                    op: kind.name(),
                    reason: format!("empty interval [{lo}, {hi}]"),
                });
            }
            unary(v[0], |x| x.clamp(*lo, *hi))
        }
        ComplexMatMul => {
            let (a, b) = (v[0], v[1]);
            let (r, k) = check_complex(kind, a)?;
            let (k2, c) = check_complex(kind, b)?;
            if k != k2 {
                return Err(mismatch(kind, a, b));
            }
            let (ar, ai) = a.data().split_at(r * k);
            let (br, bi) = b.data().split_at(k * c);
            let mut out = vec![0.0; 2 * r * c];
            let (cr, ci) = out.split_at_mut(r * c);
            gemm_nn(ar, br, cr, r, k, c);
            let mut tmp = vec![0.0; r * c];
            gemm_nn(ai, bi, &mut tmp, r, k, c);
            for (o, t) in cr.iter_mut().zip(&tmp) {
                *o -= t;
            }
            gemm_nn(ar, bi, ci, r, k, c);
            gemm_nn(ai, br, ci, r, k, c);
            Tensor::from_parts(vec![2, r, c], out)
        }
        ConjTranspose => {
            let a = v[0];
            let (r, c) = check_complex(kind, a)?;
            let mut t = permute_forward(a, &[0, 2, 1]);
            for x in &mut t.data_mut()[r * c..] {
                *x = -*x;
            }
            t
        }
    })
}

fn permute_forward(a: &Tensor, axes: &[usize]) -> Tensor {
    let shape: Vec<usize> = axes.iter().map(|&d| a.shape()[d]).collect();
    let mut data = vec![0.0; a.numel()];
    let src = a.data();
    for_each_permuted(a.shape(), axes, |o, i| data[o] = src[i]);
    Tensor::from_parts(shape, data)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: Vec<f64>) {
    let slot = &mut grads[v.0];
    match slot {
        Some(g) => {
            for (x, c) in g.iter_mut().zip(&contrib) {
                *x += c;
            }
        }
        None => {
            debug_assert_eq!(contrib.len(), nodes[v.0].value.numel());
            *slot = Some(contrib);
        }
    }
}

/// Gradient of a broadcast operand: reduce over the output when the
/// operand held a single value.
fn reduce_to(operand: &Tensor, full: Vec<f64>) -> Vec<f64> {
    if operand.numel() == 1 && full.len() != 1 {
        vec![full.iter().sum()]
    } else {
        full
    }
}

fn propagate(nodes: &[Node], idx: usize, kind: &OpKind, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    use OpKind::*;
    let node = &nodes[idx];
    let parents = &node.parents;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match kind {
        Add | Sub | Mul | Div => {
            let (a, b) = (parents[0], parents[1]);
            let (av, bv) = (val(a), val(b));
            let n = g.len();
            if needs(a) {
                let full: Vec<f64> = match kind {
                    Add | Sub => g.to_vec(),
                    Mul => (0..n).map(|i| g[i] * at(bv, i)).collect(),
                    _ => (0..n).map(|i| g[i] / at(bv, i)).collect(),
                };
                accumulate(grads, nodes, a, reduce_to(av, full));
            }
            if needs(b) {
                let full: Vec<f64> = match kind {
                    Add => g.to_vec(),
                    Sub => g.iter().map(|x| -x).collect(),
                    Mul => (0..n).map(|i| g[i] * at(av, i)).collect(),
                    _ => (0..n)
                        .map(|i| {
                            let y = at(bv, i);
                            -g[i] * at(av, i) / (y * y)
                        })
                        .collect(),
                };
                accumulate(grads, nodes, b, reduce_to(bv, full));
            }
        }
        MatMul | Affine => {
            let (x, w) = (parents[0], parents[1]);
            let (xv, wv) = (val(x), val(w));
            let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
            if needs(x) {
                let mut gx = vec![0.0; n * k];
                gemm_nt(g, wv.data(), &mut gx, n, k, m);
                accumulate(grads, nodes, x, gx);
            }
            if needs(w) {
                let mut gw = vec![0.0; k * m];
                gemm_tn(xv.data(), g, &mut gw, n, k, m);
                accumulate(grads, nodes, w, gw);
            }
            if matches!(kind, Affine) && needs(parents[2]) {
                let mut gb = vec![0.0; m];
                for row in g.chunks_exact(m) {
                    for (b, r) in gb.iter_mut().zip(row) {
                        *b += r;
                    }
                }
                accumulate(grads, nodes, parents[2], gb);
            }
        }
        Transpose | Permute(_) => {
            let a = parents[0];
            if needs(a) {
                let axes: Vec<usize> = match kind {
                    Permute(axes) => axes.clone(),
                    _ => vec![1, 0],
                };
                let mut ga = vec![0.0; g.len()];
                for_each_permuted(val(a).shape(), &axes, |o, i| ga[i] += g[o]);
                accumulate(grads, nodes, a, ga);
            }
        }
        Reshape(_) => {
            if needs(parents[0]) {
                accumulate(grads, nodes, parents[0], g.to_vec());
            }
        }
        Concat { axis } => {
            let (outer, inner) = outer_inner(out.shape(), *axis);
            let row = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &p in parents {
                let block = val(p).shape()[*axis] * inner;
                if needs(p) {
                    let mut gp = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let base = o * row + offset;
                        gp.extend_from_slice(&g[base..base + block]);
                    }
                    accumulate(grads, nodes, p, gp);
                }
                offset += block;
            }
        }
        Slice { axis, start, len } => {
            let a = parents[0];
            if needs(a) {
                let av = val(a);
                let (outer, inner) = outer_inner(av.shape(), *axis);
                let full = av.shape()[*axis] * inner;
                let mut ga = vec![0.0; av.numel()];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    ga[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, nodes, a, ga);
            }
        }
        Sum | Mean => {
            let a = parents[0];
            if needs(a) {
                let n = val(a).numel();
                let s = if matches!(kind, Mean) { g[0] / n as f64 } else { g[0] };
                accumulate(grads, nodes, a, vec![s; n]);
            }
        }
        ComplexMatMul => {
            let (a, b) = (parents[0], parents[1]);
            let (av, bv) = (val(a), val(b));
            let (r, k) = (av.shape()[1], av.shape()[2]);
            let c = bv.shape()[2];
            let (gr, gi) = g.split_at(r * c);
            let (ar, ai) = av.data().split_at(r * k);
            let (br, bi) = bv.data().split_at(k * c);
            if needs(a) {
                let mut ga = vec![0.0; 2 * r * k];
                let (gar, gai) = ga.split_at_mut(r * k);
                // dAr = Gr Br^T + Gi Bi^T ; dAi = Gi Br^T - Gr Bi^T
                gemm_nt(gr, br, gar, r, k, c);
                gemm_nt(gi, bi, gar, r, k, c);
                gemm_nt(gi, br, gai, r, k, c);
                let neg_gr: Vec<f64> = gr.iter().map(|x| -x).collect();
                gemm_nt(&neg_gr, bi, gai, r, k, c);
                accumulate(grads, nodes, a, ga);
            }
            if needs(b) {
                let mut gb = vec![0.0; 2 * k * c];
                let (gbr, gbi) = gb.split_at_mut(k * c);
                // dBr = Ar^T Gr + Ai^T Gi ; dBi = Ar^T Gi - Ai^T Gr
                gemm_tn(ar, gr, gbr, r, k, c);
                gemm_tn(ai, gi, gbr, r, k, c);
                gemm_tn(ar, gi, gbi, r, k, c);
                let neg_ai: Vec<f64> = ai.iter().map(|x| -x).collect();
                gemm_tn(&neg_ai, gr, gbi, r, k, c);
                accumulate(grads, nodes, b, gb);
            }
        }
        ConjTranspose => {
            let a = parents[0];
            if needs(a) {
                let av = val(a);
                let (r, c) = (av.shape()[1], av.shape()[2]);
                let mut ga = vec![0.0; g.len()];
                for_each_permuted(av.shape(), &[0, 2, 1], |o, i| ga[i] += g[o]);
                for x in &mut ga[r * c..] {
                    *x = -*x;
                }
                accumulate(grads, nodes, a, ga);
            }
        }
        _ => {
            let a = parents[0];
            if !needs(a) {
                return;
            }
            let x = val(a).data();
            let y = out.data();
            let ga: Vec<f64> = (0..g.len())
                .map(|i| {
                    let d = match kind {
                        Exp => y[i],
                        Log => 1.0 / x[i],
                        Softplus => sigmoid_scalar(x[i]),
                        Tanh => 1.0 - y[i] * y[i],
                        Sigmoid => y[i] * (1.0 - y[i]),
                        Gelu => gelu_grad(x[i]),
                        Square => 2.0 * x[i],
                        Sqrt => 0.5 / y[i],
                        Neg => -1.0,
                        Scale(c) => *c,
                        AddScalar(_) => 1.0,
                        Clamp { lo, hi } => {
                            if x[i] >= *lo && x[i] <= *hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!("non-unary kind {kind:?}"),
                    };
                    g[i] * d
                })
                .collect();
            accumulate(grads, nodes, a, ga);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut g = Graph::new();
        let x = g.scalar(0.0);
        let y = g.softplus(x).unwrap();
        assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn linear_form_gradient_is_other_operand() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[-1.0, 0.5, 2.0, 7.0]));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), g.value(b).data());
    }

    #[test]
    fn mismatched_shapes_report_both() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3, 2]));
        match g.add(a, b) {
            Err(AutodiffError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_of_zero_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert_eq!(g.log(x), Err(AutodiffError::NonFinite { op: "log" }));
        let big = g.scalar(1000.0);
        assert_eq!(g.exp(big), Err(AutodiffError::NonFinite { op: "exp" }));
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(AutodiffError::NotScalar(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(AutodiffError::GraphConsumed));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::vector(vec![1.0, 1.0]));
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
        let c = g.constant(Tensor::scalar(1.0));
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn permute_concat_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3, 2], &(0..12).map(f64::from).collect::<Vec<_>>()));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[2, 2, 3]);
        // element (k, i, j) of p equals a[i, j, k]
        assert_eq!(g.value(p).data()[1 * 6 + 1 * 3 + 2], 11.0);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(a));

        let s0 = g.slice(a, 1, 0, 1).unwrap();
        let s1 = g.slice(a, 1, 1, 2).unwrap();
        let c = g.concat(&[s0, s1], 1).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn complex_matmul_matches_manual() {
        // (1 + 2i) * (3 - i) = 5 + 5i
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1, 1], &[3.0, -1.0]));
        let c = g.complex_matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 5.0]);
        let h = g.conj_transpose(c).unwrap();
        assert_eq!(g.value(h).data(), &[5.0, -5.0]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.param(Tensor::scalar(2.0));
        let y = g.mul(a, s).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap().item(), 6.0);
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
