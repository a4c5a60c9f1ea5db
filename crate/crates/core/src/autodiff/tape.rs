use std::cell::{Cell, Ref, RefCell};

use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise op is expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[c]` or `[1 x c]` against `[r x c]`.
    Row,
    /// `[r x 1]` against `[r x c]`.
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    Relu(usize),
    Softmax(usize),
    Log(usize),
    Exp(usize),
    MeanAll(usize),
    SumAll(usize),
    SumAxis(usize, usize),
    L2NormRows(usize),
    LayerNorm(usize, Vec<f64>),
    Pairwise(usize, usize),
    StopGradient,
    StraightThrough(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive applications.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// d(loss)/d(var); zeros when the var is off the loss path.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn wrt_slice(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn broadcast_rule(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Broadcast> {
    if lhs.shape() == rhs.shape() {
        return Ok(Broadcast::Same);
    }
    if lhs.shape().len() == 2 {
        let (r, c) = (lhs.rows(), lhs.cols());
        match rhs.shape() {
            [n] if *n == c => return Ok(Broadcast::Row),
            [1, n] if *n == c => return Ok(Broadcast::Row),
            [n, 1] if *n == r => return Ok(Broadcast::Col),
            _ => {}
        }
    }
    Err(Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    })
}

#[inline]
fn rhs_index(bc: Broadcast, idx: usize, cols: usize) -> usize {
    match bc {
        Broadcast::Same => idx,
        Broadcast::Row => idx % cols,
        Broadcast::Col => idx / cols,
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn elementwise(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize, Broadcast) -> Op,
    ) -> Result<Var> {
        let (value, bc) = {
            let va = self.value(a);
            let vb = self.value(b);
            let bc = broadcast_rule(op, &va, &vb)?;
            let cols = va.cols();
            let bd = vb.data();
            let data: Vec<f64> = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[rhs_index(bc, i, cols)]))
                .collect();
            (Tensor::new(va.shape().to_vec(), data)?, bc)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, make(a.0, b.0, bc), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = {
            let va = self.value(a);
            let data = va.data().iter().map(|x| x * factor).collect();
            Tensor::new(va.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale(a.0, factor), rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let vb = self.value(b);
            if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
                return Err(shape_err("matmul", &va, &vb));
            }
            va.matmul(&vb)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            if va.shape().len() != 2 {
                return Err(contract(format!(
                    "transpose needs a matrix, got {:?}",
                    va.shape()
                )));
            }
            va.transpose()
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat of zero tensors"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let rows = first.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape().len() != 2 || t.rows() != rows {
                    return Err(shape_err("concat", first, t));
                }
                widths.push(t.cols());
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.0).collect()), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = {
            let va = self.value(a);
            if va.shape().len() != 2 || start >= end || end > va.cols() {
                return Err(contract(format!(
                    "slice {start}..{end} out of range for {:?}",
                    va.shape()
                )));
            }
            let mut data = Vec::with_capacity(va.rows() * (end - start));
            for r in 0..va.rows() {
                data.extend_from_slice(&va.row(r)[start..end]);
            }
            Tensor::matrix(va.rows(), end - start, data)?
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a.0, start), rg))
    }

    /// Rows of `a` picked by `indices` (repeats allowed).
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = {
            let va = self.value(a);
            if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
                return Err(contract(format!(
                    "gather row {bad} out of range for {:?}",
                    va.shape()
                )));
            }
            va.select_rows(indices)
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a.0, indices.to_vec()), rg))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = {
            let va = self.value(a);
            let data = va.data().iter().map(|&x| f(x)).collect();
            Tensor::new(va.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(contract(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a.0)))
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let c = va.cols();
            if c == 0 || va.is_empty() {
                return Err(contract("softmax over an empty axis"));
            }
            let mut data = va.data().to_vec();
            for row in data.chunks_mut(c) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::new(va.shape().to_vec(), data)?
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a.0), rg))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let s = {
            let va = self.value(a);
            va.data().iter().sum::<f64>() / va.len() as f64
        };
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a.0), rg)
    }

    /// Axis 0 sums rows into `[1 x c]`; axis 1 sums columns into `[r x 1]`.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let (r, c) = (va.rows(), va.cols());
            match axis {
                0 => {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in out.iter_mut().zip(va.row(i)) {
                            *o += v;
                        }
                    }
                    Tensor::matrix(1, c, out)?
                }
                1 => Tensor::matrix(r, 1, (0..r).map(|i| va.row(i).iter().sum()).collect())?,
                _ => return Err(contract(format!("sum over axis {axis} of a matrix"))),
            }
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAxis(a.0, axis), rg))
    }

    /// Euclidean norm of each row, as `[r x 1]`.
    pub fn l2_norm_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let r = va.rows();
            let data = (0..r)
                .map(|i| va.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            Tensor::matrix(r, 1, data)?
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::L2NormRows(a.0), rg))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, population
    /// variance. Affine terms are applied by the caller.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Result<Var> {
        let (value, inv_std) = {
            let va = self.value(a);
            let c = va.cols();
            if c == 0 {
                return Err(contract("layer norm over an empty axis"));
            }
            let mut data = va.data().to_vec();
            let mut inv_std = Vec::with_capacity(va.rows());
            for row in data.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
                inv_std.push(inv);
            }
            (Tensor::new(va.shape().to_vec(), data)?, inv_std)
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::LayerNorm(a.0, inv_std), rg))
    }

    /// `D[i][j] = ||a_i - b_j||` for `a: [n x g]`, `b: [m x g]`.
    pub fn pairwise_euclidean(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let va = self.value(a);
            let vb = self.value(b);
            pairwise_distances(&va, &vb)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Pairwise(a.0, b.0), rg))
    }

    /// Same value, no gradient flow.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// `hard + (soft - sg(soft))`: the value is `hard` bit-for-bit and the
    /// gradient goes entirely to `soft`.
    pub fn straight_through(&self, hard: Var, soft: Var) -> Result<Var> {
        let value = {
            let vh = self.value(hard);
            let vs = self.value(soft);
            if vh.shape() != vs.shape() {
                return Err(shape_err("straight_through", &vh, &vs));
            }
            vh.clone()
        };
        let rg = self.rg(soft);
        Ok(self.push(value, Op::StraightThrough(soft.0), rg))
    }

    /// Reverse sweep from a scalar loss. A tape can be differentiated once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(contract("backward called twice on the same tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

pub(crate) fn pairwise_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(shape_err("pairwise_euclidean", a, b));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            let d2: f64 = ai
                .iter()
                .zip(b.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            out.push(d2.sqrt());
        }
    }
    Tensor::matrix(n, m, out)
}

fn reduce_broadcast(
    g: &[f64],
    bc: Broadcast,
    rows: usize,
    cols: usize,
    out: &mut [f64],
    sign: f64,
) {
    match bc {
        Broadcast::Same => {
            for (o, v) in out.iter_mut().zip(g) {
                *o += sign * v;
            }
        }
        Broadcast::Row => {
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += sign * g[r * cols + c];
                }
            }
        }
        Broadcast::Col => {
            for r in 0..rows {
                out[r] += sign * g[r * cols..(r + 1) * cols].iter().sum::<f64>();
            }
        }
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let len = |i: usize| nodes[i].value.len();
    match &nodes[id].op {
        Op::Leaf | Op::StopGradient => {}
        &Op::Add(a, b, bc) | &Op::Sub(a, b, bc) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            if wants(a) {
                let ga = accumulate(&mut grads[a], len(a));
                for (o, v) in ga.iter_mut().zip(g) {
                    *o += v;
                }
            }
            if wants(b) {
                let gb = accumulate(&mut grads[b], len(b));
                reduce_broadcast(g, bc, out.rows(), out.cols(), gb, sign);
            }
        }
        &Op::Mul(a, b, bc) => {
            let cols = out.cols();
            if wants(a) {
                let bd = nodes[b].value.data();
                let ga = accumulate(&mut grads[a], len(a));
                for (i, (o, v)) in ga.iter_mut().zip(g).enumerate() {
                    *o += v * bd[rhs_index(bc, i, cols)];
                }
            }
            if wants(b) {
                let ad = nodes[a].value.data();
                let prod: Vec<f64> = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                let gb = accumulate(&mut grads[b], len(b));
                reduce_broadcast(&prod, bc, out.rows(), cols, gb, 1.0);
            }
        }
        &Op::Scale(a, f) => {
            if wants(a) {
                let ga = accumulate(&mut grads[a], len(a));
                for (o, v) in ga.iter_mut().zip(g) {
                    *o += f * v;
                }
            }
        }
        &Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if wants(a) {
                let ga = accumulate(&mut grads[a], m * k);
                matmul_bt_into(g, vb.data(), ga, m, n, k);
            }
            if wants(b) {
                let gb = accumulate(&mut grads[b], k * n);
                matmul_at_into(va.data(), g, gb, k, m, n);
            }
        }
        &Op::Transpose(a) => {
            if wants(a) {
                let (r, c) = (out.rows(), out.cols());
                let ga = accumulate(&mut grads[a], r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if wants(p) {
                    let gp = accumulate(&mut grads[p], rows * w);
                    for r in 0..rows {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        &Op::SliceCols(a, start) => {
            if wants(a) {
                let src_cols = nodes[a].value.cols();
                let w = out.cols();
                let ga = accumulate(&mut grads[a], len(a));
                for r in 0..out.rows() {
                    for c in 0..w {
                        ga[r * src_cols + start + c] += g[r * w + c];
                    }
                }
            }
        }
        Op::GatherRows(a, indices) => {
            let a = *a;
            if wants(a) {
                let c = out.cols();
                let ga = accumulate(&mut grads[a], len(a));
                for (r, &src) in indices.iter().enumerate() {
                    for k in 0..c {
                        ga[src * c + k] += g[r * c + k];
                    }
                }
            }
        }
        &Op::Relu(a) => {
            if wants(a) {
                let ad = nodes[a].value.data();
                let ga = accumulate(&mut grads[a], len(a));
                for ((o, v), x) in ga.iter_mut().zip(g).zip(ad) {
                    if *x > 0.0 {
                        *o += v;
                    }
                }
            }
        }
        &Op::Softmax(a) => {
            if wants(a) {
                let c = out.cols();
                let y = out.data();
                let ga = accumulate(&mut grads[a], len(a));
                for r in 0..out.rows() {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for k in 0..c {
                        ga[r * c + k] += yr[k] * (gr[k] - dot);
                    }
                }
            }
        }
        &Op::Log(a) => {
            if wants(a) {
                let ad = nodes[a].value.data();
                let ga = accumulate(&mut grads[a], len(a));
                for ((o, v), x) in ga.iter_mut().zip(g).zip(ad) {
                    *o += v / x;
                }
            }
        }
        &Op::Exp(a) => {
            if wants(a) {
                let ga = accumulate(&mut grads[a], len(a));
                for ((o, v), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *o += v * y;
                }
            }
        }
        &Op::SumAll(a) => {
            if wants(a) {
                let ga = accumulate(&mut grads[a], len(a));
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
        }
        &Op::MeanAll(a) => {
            if wants(a) {
                let n = len(a) as f64;
                let ga = accumulate(&mut grads[a], len(a));
                for o in ga.iter_mut() {
                    *o += g[0] / n;
                }
            }
        }
        &Op::SumAxis(a, axis) => {
            if wants(a) {
                let va = &nodes[a].value;
                let (r, c) = (va.rows(), va.cols());
                let ga = accumulate(&mut grads[a], r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += if axis == 0 { g[j] } else { g[i] };
                    }
                }
            }
        }
        &Op::L2NormRows(a) => {
            if wants(a) {
                let va = &nodes[a].value;
                let c = va.cols();
                let ga = accumulate(&mut grads[a], len(a));
                for r in 0..va.rows() {
                    let norm = out.data()[r];
                    if norm == 0.0 {
                        continue;
                    }
                    for k in 0..c {
                        ga[r * c + k] += g[r] * va.data()[r * c + k] / norm;
                    }
                }
            }
        }
        Op::LayerNorm(a, inv_std) => {
            let a = *a;
            if wants(a) {
                let c = out.cols();
                let xhat = out.data();
                let ga = accumulate(&mut grads[a], len(a));
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for k in 0..c {
                        ga[r * c + k] += inv * (gr[k] - mean_g - xr[k] * mean_gx);
                    }
                }
            }
        }
        &Op::Pairwise(a, b) => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let (n, m, dim) = (va.rows(), vb.rows(), va.cols());
            let d = out.data();
            let mut coeffs = Vec::with_capacity(n * m);
            for i in 0..n {
                for j in 0..m {
                    let dij = d[i * m + j];
                    // subgradient 0 at coincident points
                    coeffs.push(if dij > 0.0 { g[i * m + j] / dij } else { 0.0 });
                }
            }
            if wants(a) {
                let ga = accumulate(&mut grads[a], n * dim);
                for i in 0..n {
                    let ai = va.row(i);
                    for j in 0..m {
                        let cf = coeffs[i * m + j];
                        if cf == 0.0 {
                            continue;
                        }
                        let bj = vb.row(j);
                        for k in 0..dim {
                            ga[i * dim + k] += cf * (ai[k] - bj[k]);
                        }
                    }
                }
            }
            if wants(b) {
                let gb = accumulate(&mut grads[b], m * dim);
                for i in 0..n {
                    let ai = va.row(i);
                    for j in 0..m {
                        let cf = coeffs[i * m + j];
                        if cf == 0.0 {
                            continue;
                        }
                        let bj = vb.row(j);
                        for k in 0..dim {
                            gb[j * dim + k] -= cf * (ai[k] - bj[k]);
                        }
                    }
                }
            }
        }
        &Op::StraightThrough(soft) => {
            if wants(soft) {
                let gs = accumulate(&mut grads[soft], len(soft));
                for (o, v) in gs.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
    }
}
