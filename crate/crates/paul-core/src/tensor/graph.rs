//! The tape: ops append nodes, `backward` walks them once in reverse.

use std::rc::Rc;

use super::{Tensor, TensorError};
use crate::special;

/// Handle to a node in one [`Graph`]. Only valid for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum MapKind {
    Tanh,
    Exp,
    Log,
    Abs,
    Relu,
    Square,
    Sqrt,
    Neg,
    LnGamma,
    Digamma,
}

impl MapKind {
    fn name(self) -> &'static str {
        match self {
            MapKind::Tanh => "tanh",
            MapKind::Exp => "exp",
            MapKind::Log => "log",
            MapKind::Abs => "abs",
            MapKind::Relu => "relu",
            MapKind::Square => "square",
            MapKind::Sqrt => "sqrt",
            MapKind::Neg => "neg",
            MapKind::LnGamma => "ln_gamma",
            MapKind::Digamma => "digamma",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Bin(BinKind, Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Map(MapKind, Var),
    /// `mul * x + c`; only the slope matters for backward
    Affine(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    LogSumExp(Var, usize),
    Reshape(Var),
    /// `out[i] = src[idx[i]]`
    Gather(Var, Rc<Vec<usize>>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Dynamic compute tape. Construction order is the topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(data: &[f64], op: &'static str) -> Result<(), TensorError> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

/// Iteration layout for reducing `axis` of `shape`: (outer, len, inner).
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v` after `backward`, shaped like its value.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- binary elementwise --------------------------------------------

    /// rhs either matches lhs exactly or broadcasts over the leading axis
    /// (rhs.shape == lhs.shape[1..]).
    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (la, lb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let broadcast = la.shape() != lb.shape();
        if broadcast && (la.shape().len() != lb.shape().len() + 1 || &la.shape()[1..] != lb.shape())
        {
            return Err(TensorError::ShapeMismatch(format!(
                "binary op on {:?} vs {:?}",
                la.shape(),
                lb.shape()
            )));
        }
        let n = la.numel();
        let bn = lb.numel();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let x = la.data()[i];
            let y = lb.data()[i % bn.max(1)];
            out[i] = match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
        }
        let opname = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        check_finite(&out, opname)?;
        let value = Tensor { shape: la.shape().to_vec(), data: out };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Bin(kind, a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.bin(BinKind::Div, a, b)
    }

    // ---- matmul / transpose --------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul on {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        check_finite(&out, "matmul")?;
        let value = Tensor { shape: vec![m, n], data: out };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "transpose on rank-{} tensor",
                ta.shape().len()
            )));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let value = Tensor { shape: vec![n, m], data: transpose_raw(ta.data(), m, n) };
        let rg = self.requires(a);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    // ---- unary maps ------------------------------------------------------

    fn map(&mut self, kind: MapKind, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        match kind {
            MapKind::Log if ta.data().iter().any(|&x| x <= 0.0) => {
                return Err(TensorError::Domain("log requires strictly positive input".into()))
            }
            MapKind::Sqrt if ta.data().iter().any(|&x| x < 0.0) => {
                return Err(TensorError::Domain("sqrt requires non-negative input".into()))
            }
            MapKind::LnGamma | MapKind::Digamma if ta.data().iter().any(|&x| x <= 0.0) => {
                return Err(TensorError::Domain(format!(
                    "{} requires strictly positive input",
                    kind.name()
                )))
            }
            _ => {}
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .map(|&x| match kind {
                MapKind::Tanh => x.tanh(),
                MapKind::Exp => x.exp(),
                MapKind::Log => x.ln(),
                MapKind::Abs => x.abs(),
                MapKind::Relu => x.max(0.0),
                MapKind::Square => x * x,
                MapKind::Sqrt => x.sqrt(),
                MapKind::Neg => -x,
                MapKind::LnGamma => special::ln_gamma(x),
                MapKind::Digamma => special::digamma(x),
            })
            .collect();
        check_finite(&out, kind.name())?;
        let value = Tensor { shape: ta.shape().to_vec(), data: out };
        let rg = self.requires(a);
        Ok(self.push(Op::Map(kind, a), value, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::Log, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::Abs, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::Sqrt, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::Neg, a)
    }

    pub fn ln_gamma(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::LnGamma, a)
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map(MapKind::Digamma, a)
    }

    /// `mul * x + add`, elementwise with scalar constants.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f64> = ta.data().iter().map(|&x| mul * x + add).collect();
        check_finite(&out, "affine")?;
        let value = Tensor { shape: ta.shape().to_vec(), data: out };
        let rg = self.requires(a);
        Ok(self.push(Op::Affine(a, mul), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.affine(a, c, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.affine(a, 1.0, c)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        check_finite(&[s], "sum_all")?;
        let rg = self.requires(a);
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s), rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.nodes[a.0].value.numel() as f64;
        let s: f64 = self.nodes[a.0].value.data().iter().sum::<f64>() / n;
        check_finite(&[s], "mean_all")?;
        let rg = self.requires(a);
        Ok(self.push(Op::MeanAll(a), Tensor::scalar(s), rg))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.shape().len() {
            return Err(TensorError::ShapeMismatch(format!(
                "sum_axis axis {axis} out of range for shape {:?}",
                ta.shape()
            )));
        }
        let (outer, len, inner) = axis_layout(ta.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += ta.data()[base + i];
                }
            }
        }
        check_finite(&out, "sum_axis")?;
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let value = Tensor { shape, data: out };
        let rg = self.requires(a);
        Ok(self.push(Op::SumAxis(a, axis), value, rg))
    }

    /// Numerically stable `log(sum(exp(x)))` along `axis`.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if axis >= ta.shape().len() {
            return Err(TensorError::ShapeMismatch(format!(
                "logsumexp axis {axis} out of range for shape {:?}",
                ta.shape()
            )));
        }
        let (outer, len, inner) = axis_layout(ta.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(ta.data()[(o * len + l) * inner + i]);
                }
                let mut s = 0.0;
                for l in 0..len {
                    s += (ta.data()[(o * len + l) * inner + i] - mx).exp();
                }
                out[o * inner + i] = mx + s.ln();
            }
        }
        check_finite(&out, "logsumexp")?;
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let value = Tensor { shape, data: out };
        let rg = self.requires(a);
        Ok(self.push(Op::LogSumExp(a, axis), value, rg))
    }

    // ---- shape / indexing -------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                ta.shape(),
                shape
            )));
        }
        let value = Tensor { shape, data: ta.data().to_vec() };
        let rg = self.requires(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// `out[i] = src[indices[i]]`; backward scatter-adds.
    pub fn gather(
        &mut self,
        a: Var,
        indices: Rc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "gather: {} indices vs out shape {:?}",
                indices.len(),
                out_shape
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.numel()) {
            return Err(TensorError::ShapeMismatch(format!(
                "gather index {bad} out of range for {} elements",
                ta.numel()
            )));
        }
        let out: Vec<f64> = indices.iter().map(|&i| ta.data()[i]).collect();
        let value = Tensor { shape: out_shape, data: out };
        let rg = self.requires(a);
        Ok(self.push(Op::Gather(a, indices), value, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Contract(
                "backward on a value with no grad-requiring inputs".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let grad = self.nodes[idx].grad.clone().expect("checked above");
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &grad)?;
        }
        // Leaves feed the optimizer; poisoned gradients fail loudly.
        for node in &self.nodes {
            if let (Op::Leaf, Some(g)) = (&node.op, &node.grad) {
                check_finite(g, "backward")?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; n]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    fn propagate(&mut self, idx: usize, op: &Op, grad: &[f64]) -> Result<(), TensorError> {
        match op {
            Op::Leaf => {}
            Op::Bin(kind, a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let bn = vb.numel();
                if self.requires(*a) {
                    let ga: Vec<f64> = match kind {
                        BinKind::Add | BinKind::Sub => grad.to_vec(),
                        BinKind::Mul => grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g * vb.data()[i % bn])
                            .collect(),
                        BinKind::Div => grad
                            .iter()
                            .enumerate()
                            .map(|(i, &g)| g / vb.data()[i % bn])
                            .collect(),
                    };
                    self.accumulate(*a, &ga);
                }
                if self.requires(*b) {
                    // reduce over the broadcast leading axis when shapes differ
                    let mut gb = vec![0.0; bn];
                    for (i, &g) in grad.iter().enumerate() {
                        let j = i % bn;
                        match kind {
                            BinKind::Add => gb[j] += g,
                            BinKind::Sub => gb[j] -= g,
                            BinKind::Mul => gb[j] += g * va.data()[i],
                            BinKind::Div => {
                                let d = vb.data()[j];
                                gb[j] -= g * va.data()[i] / (d * d);
                            }
                        }
                    }
                    self.accumulate(*b, &gb);
                }
            }
            Op::Matmul(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires(*a) {
                    // dA = G . B^T
                    let bt = transpose_raw(vb.data(), k, n);
                    let ga = matmul_raw(grad, &bt, m, n, k);
                    self.accumulate(*a, &ga);
                }
                if self.requires(*b) {
                    // dB = A^T . G
                    let at = transpose_raw(va.data(), m, k);
                    let gb = matmul_raw(&at, grad, k, m, n);
                    self.accumulate(*b, &gb);
                }
            }
            Op::Transpose(a) => {
                if self.requires(*a) {
                    let sh = self.nodes[idx].value.shape().to_vec();
                    let ga = transpose_raw(grad, sh[0], sh[1]);
                    self.accumulate(*a, &ga);
                }
            }
            Op::Map(kind, a) => {
                if self.requires(*a) {
                    let x = self.nodes[a.0].value.clone();
                    let y = self.nodes[idx].value.clone();
                    let ga: Vec<f64> = grad
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| {
                            let xi = x.data()[i];
                            let yi = y.data()[i];
                            g * match kind {
                                MapKind::Tanh => 1.0 - yi * yi,
                                MapKind::Exp => yi,
                                MapKind::Log => 1.0 / xi,
                                MapKind::Abs => {
                                    if xi > 0.0 {
                                        1.0
                                    } else if xi < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                MapKind::Relu => {
                                    if xi > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                MapKind::Square => 2.0 * xi,
                                MapKind::Sqrt => 0.5 / yi,
                                MapKind::Neg => -1.0,
                                MapKind::LnGamma => special::digamma(xi),
                                MapKind::Digamma => special::trigamma(xi),
                            }
                        })
                        .collect();
                    self.accumulate(*a, &ga);
                }
            }
            Op::Affine(a, mul) => {
                if self.requires(*a) {
                    let ga: Vec<f64> = grad.iter().map(|&g| g * mul).collect();
                    self.accumulate(*a, &ga);
                }
            }
            Op::SumAll(a) => {
                if self.requires(*a) {
                    let n = self.nodes[a.0].value.numel();
                    self.accumulate(*a, &vec![grad[0]; n]);
                }
            }
            Op::MeanAll(a) => {
                if self.requires(*a) {
                    let n = self.nodes[a.0].value.numel();
                    self.accumulate(*a, &vec![grad[0] / n as f64; n]);
                }
            }
            Op::SumAxis(a, axis) => {
                if self.requires(*a) {
                    let sh = self.nodes[a.0].value.shape().to_vec();
                    let (outer, len, inner) = axis_layout(&sh, *axis);
                    let mut ga = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                ga[base + i] = grad[o * inner + i];
                            }
                        }
                    }
                    self.accumulate(*a, &ga);
                }
            }
            Op::LogSumExp(a, axis) => {
                if self.requires(*a) {
                    // d lse / d x = softmax(x) along the reduced axis
                    let x = self.nodes[a.0].value.clone();
                    let lse = self.nodes[idx].value.clone();
                    let (outer, len, inner) = axis_layout(x.shape(), *axis);
                    let mut ga = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let g = grad[o * inner + i];
                            let l0 = lse.data()[o * inner + i];
                            for l in 0..len {
                                let pos = (o * len + l) * inner + i;
                                ga[pos] = g * (x.data()[pos] - l0).exp();
                            }
                        }
                    }
                    self.accumulate(*a, &ga);
                }
            }
            Op::Reshape(a) => {
                if self.requires(*a) {
                    self.accumulate(*a, grad);
                }
            }
            Op::Gather(a, indices) => {
                if self.requires(*a) {
                    let mut ga = vec![0.0; self.nodes[a.0].value.numel()];
                    for (pos, &src) in indices.iter().enumerate() {
                        ga[src] += grad[pos];
                    }
                    self.accumulate(*a, &ga);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}
