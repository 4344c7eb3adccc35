//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and the handles
//! of its inputs, so node order is a topological order by construction.
//! Elementwise binary operations broadcast only over the leading batch
//! dimension: a `[1, d]` (or `[d]`) operand pairs with an `[n, d]` operand.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds reachable through [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    /// Concatenate along axis 0 (rows) or 1 (columns).
    Concat(usize),
    Relu,
    Sigmoid,
    Tanh,
    SoftmaxColumns,
    MeanPoolRows,
    MaxPoolRows,
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>, usize),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxColumns(Var),
    SoftmaxBlocks(Var, usize),
    MeanPoolRows(Var),
    MaxPoolRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ScaleRows(Var, Var),
    Affine(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner record of one forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Output row count for a batch-broadcast binary op, or `None` if the shapes
/// do not conform.
fn broadcast_rows(a: &Tensor, b: &Tensor) -> Option<usize> {
    let ((ra, ca), (rb, cb)) = (dims(a), dims(b));
    if ca != cb {
        return None;
    }
    match (ra, rb) {
        _ if ra == rb => Some(ra),
        (1, n) | (n, 1) => Some(n),
        _ => None,
    }
}

fn out_shape(a: &Tensor, b: &Tensor, rows: usize) -> Vec<usize> {
    if a.shape().len() == 2 || b.shape().len() == 2 {
        vec![rows, a.cols()]
    } else {
        vec![a.cols()]
    }
}

/// Fold an `[n, d]` gradient into the shape of an operand that may have been
/// broadcast from `[1, d]`.
fn reduce_to(grad: &[f64], rows: usize, cols: usize, target_rows: usize, into: &mut [f64]) {
    if target_rows == rows {
        for (o, g) in into.iter_mut().zip(grad) {
            *o += g;
        }
    } else {
        for r in 0..rows {
            for (o, g) in into.iter_mut().zip(&grad[r * cols..(r + 1) * cols]) {
                *o += g;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_in_place(values: &mut [f64], stride: usize, offset: usize, count: usize) {
    let idx = |i: usize| offset + i * stride;
    let mut max = f64::NEG_INFINITY;
    for i in 0..count {
        max = max.max(values[idx(i)]);
    }
    let mut total = 0.0;
    for i in 0..count {
        let e = libm::exp(values[idx(i)] - max);
        values[idx(i)] = e;
        total += e;
    }
    for i in 0..count {
        values[idx(i)] /= total;
    }
}

fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    stride: usize,
    offset: usize,
    count: usize,
) {
    let idx = |i: usize| offset + i * stride;
    let dot: f64 = (0..count).map(|i| y[idx(i)] * dy[idx(i)]).sum();
    for i in 0..count {
        dx[idx(i)] += y[idx(i)] * (dy[idx(i)] - dot);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf node. Leaves with `requires_grad` receive entries in the
    /// gradient map returned by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = kind_name(kind);
        if inputs.is_empty() {
            return Err(Error::Empty(name));
        }
        let binary = |inputs: &[Var]| -> Result<(Var, Var)> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::Config(alloc::format!(
                    "{name} takes two inputs, got {}",
                    inputs.len()
                ))),
            }
        };
        let unary = |inputs: &[Var]| -> Result<Var> {
            match inputs {
                [a] => Ok(*a),
                _ => Err(Error::Config(alloc::format!(
                    "{name} takes one input, got {}",
                    inputs.len()
                ))),
            }
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            OpKind::Add => {
                let (a, b) = binary(inputs)?;
                self.add(a, b)
            }
            OpKind::Sub => {
                let (a, b) = binary(inputs)?;
                self.sub(a, b)
            }
            OpKind::Mul => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            OpKind::Concat(axis) => self.concat(inputs, axis),
            OpKind::Relu => Ok(self.relu(unary(inputs)?)),
            OpKind::Sigmoid => Ok(self.sigmoid(unary(inputs)?)),
            OpKind::Tanh => Ok(self.tanh(unary(inputs)?)),
            OpKind::SoftmaxColumns => Ok(self.softmax_columns(unary(inputs)?)),
            OpKind::MeanPoolRows => Ok(self.mean_pool_rows(unary(inputs)?)),
            OpKind::MaxPoolRows => Ok(self.max_pool_rows(unary(inputs)?)),
            OpKind::Sum => Ok(self.sum(unary(inputs)?)),
            OpKind::Mean => Ok(self.mean(unary(inputs)?)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((r, k), (k2, c)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; r * c];
        matmul_into(ta.values(), tb.values(), &mut out, r, k, c);
        let needs = self.grad_of(&[a, b]);
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::MatMul(a, b), needs))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rows =
            broadcast_rows(ta, tb).ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let cols = ta.cols();
        let (ra, rb) = (ta.rows(), tb.rows());
        let (va, vb) = (ta.values(), tb.values());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let ar = if ra == 1 { 0 } else { r };
            let br = if rb == 1 { 0 } else { r };
            let (sa, sb) = (
                &va[ar * cols..(ar + 1) * cols],
                &vb[br * cols..(br + 1) * cols],
            );
            out.extend(sa.iter().zip(sb).map(|(&x, &y)| f(x, y)));
        }
        let shape = out_shape(ta, tb, rows);
        Ok((Tensor::raw(shape, out), self.grad_of(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.elementwise(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.elementwise(a, b, "elementwise_mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat"))?;
        let t0 = self.value(first);
        let out = match axis {
            1 => {
                let rows = t0.rows();
                for &v in &inputs[1..] {
                    let t = self.value(v);
                    if t.rows() != rows {
                        return Err(Error::shape("concat", t0.shape(), t.shape()));
                    }
                }
                let cols: usize = inputs.iter().map(|&v| self.value(v).cols()).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &v in inputs {
                        out.extend_from_slice(self.value(v).row(r));
                    }
                }
                if inputs.iter().all(|&v| self.value(v).shape().len() == 1) {
                    Tensor::raw(vec![cols], out)
                } else {
                    Tensor::raw(vec![rows, cols], out)
                }
            }
            0 => {
                let cols = t0.cols();
                for &v in &inputs[1..] {
                    let t = self.value(v);
                    if t.cols() != cols {
                        return Err(Error::shape("concat", t0.shape(), t.shape()));
                    }
                }
                let rows: usize = inputs.iter().map(|&v| self.value(v).rows()).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for &v in inputs {
                    out.extend_from_slice(self.value(v).values());
                }
                Tensor::raw(vec![rows, cols], out)
            }
            _ => {
                return Err(Error::Config(alloc::format!(
                    "concat axis {axis} unsupported"
                )));
            }
        };
        let needs = self.grad_of(inputs);
        Ok(self.push(out, Op::Concat(inputs.to_vec(), axis), needs))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        let needs = self.grad_of(&[x]);
        self.push(t, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), libm::tanh)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    /// Softmax down each column of a matrix.
    pub fn softmax_columns(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = dims(t);
        let mut out = t.values().to_vec();
        for j in 0..c {
            softmax_in_place(&mut out, c, j, r);
        }
        let shape = t.shape().to_vec();
        let needs = self.grad_of(&[x]);
        self.push(Tensor::raw(shape, out), Op::SoftmaxColumns(x), needs)
    }

    /// Each row of `x` is an `m x m` row-major matrix; apply
    /// [`Tape::softmax_columns`] to every one of them.
    pub fn softmax_blocks(&mut self, x: Var, m: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        if c != m * m {
            return Err(Error::shape("softmax_blocks", t.shape(), &[r, m * m]));
        }
        let mut out = t.values().to_vec();
        for row in 0..r {
            for j in 0..m {
                softmax_in_place(&mut out, m, row * c + j, m);
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.grad_of(&[x]);
        Ok(self.push(Tensor::raw(shape, out), Op::SoftmaxBlocks(x, m), needs))
    }

    pub fn mean_pool_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = dims(t);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let needs = self.grad_of(&[x]);
        self.push(Tensor::raw(vec![c], out), Op::MeanPoolRows(x), needs)
    }

    pub fn max_pool_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = dims(t);
        let mut out = t.row(0).to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        let needs = self.grad_of(&[x]);
        self.push(Tensor::raw(vec![c], out), Op::MaxPoolRows(x, arg), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.grad_of(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let needs = self.grad_of(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Row sums: `[n, d] -> [n, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let r = t.rows();
        let out = (0..r).map(|i| t.row(i).iter().sum()).collect();
        let needs = self.grad_of(&[x]);
        self.push(Tensor::raw(vec![r, 1], out), Op::SumCols(x), needs)
    }

    /// Row lookup: `table[ids[k], :]` for each `k`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("gather"));
        }
        let t = self.value(table);
        let (v, c) = dims(t);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocabulary {
                    field: "gather".into(),
                    id,
                    vocab: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let needs = self.grad_of(&[table]);
        Ok(self.push(
            Tensor::raw(vec![ids.len(), c], out),
            Op::Gather(table, ids.to_vec()),
            needs,
        ))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = dims(t);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let shape = if t.shape().len() == 1 {
            vec![len]
        } else {
            vec![r, len]
        };
        let needs = self.grad_of(&[x]);
        Ok(self.push(Tensor::raw(shape, out), Op::SliceCols(x, start), needs))
    }

    /// `x[i, j] * s[i]` for `x: [n, d]`, `s: [n, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (r, c) = dims(tx);
        if ts.len() != r || ts.cols() != 1 && r != 1 {
            return Err(Error::shape("scale_rows", tx.shape(), ts.shape()));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let k = ts.values()[i];
            out.extend(tx.row(i).iter().map(|v| v * k));
        }
        let shape = tx.shape().to_vec();
        let needs = self.grad_of(&[x, s]);
        Ok(self.push(Tensor::raw(shape, out), Op::ScaleRows(x, s), needs))
    }

    /// Gradients of the scalar `root` with respect to every leaf created with
    /// `requires_grad`. Leaves the root does not depend on get zeros. A tape
    /// supports exactly one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.consumed = true;

        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let shape = node.value.shape().to_vec();
                let g = match grads.get_mut(idx).and_then(Option::take) {
                    Some(g) => Tensor::raw(shape, g),
                    None => Tensor::zeros(&shape),
                };
                out.insert(Var(idx), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        // Lazily allocated gradient slot for an input.
        fn slot<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            nodes: &[Node],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let ((r, k), (_, c)) = (dims(ta), dims(tb));
                if let Some(da) = slot(grads, nodes, *a) {
                    matmul_bt_into(g, tb.values(), da, r, c, k);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    matmul_at_into(ta.values(), g, db, r, k, c);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (rows, cols) = dims(y);
                let ra = nodes[a.0].value.rows();
                let rb = nodes[b.0].value.rows();
                if let Some(da) = slot(grads, nodes, *a) {
                    reduce_to(g, rows, cols, ra, da);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    if sign < 0.0 {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        reduce_to(&neg, rows, cols, rb, db);
                    } else {
                        reduce_to(g, rows, cols, rb, db);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (rows, cols) = dims(y);
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let at = |t: &Tensor, r: usize, c: usize| {
                    let rr = if t.rows() == 1 { 0 } else { r };
                    t.values()[rr * cols + c]
                };
                if nodes[a.0].needs_grad {
                    let prod: Vec<f64> = (0..rows * cols)
                        .map(|i| g[i] * at(tb, i / cols, i % cols))
                        .collect();
                    let da = slot(grads, nodes, *a).unwrap();
                    reduce_to(&prod, rows, cols, ta.rows(), da);
                }
                if nodes[b.0].needs_grad {
                    let prod: Vec<f64> = (0..rows * cols)
                        .map(|i| g[i] * at(ta, i / cols, i % cols))
                        .collect();
                    let db = slot(grads, nodes, *b).unwrap();
                    reduce_to(&prod, rows, cols, tb.rows(), db);
                }
            }
            Op::Concat(inputs, axis) => {
                let (rows, cols) = dims(y);
                let mut offset = 0;
                for &v in inputs {
                    let t = &nodes[v.0].value;
                    let (vr, vc) = dims(t);
                    if let Some(dv) = slot(grads, nodes, v) {
                        if *axis == 1 {
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + vc];
                                for (o, s) in dv[r * vc..(r + 1) * vc].iter_mut().zip(src) {
                                    *o += s;
                                }
                            }
                        } else {
                            let src = &g[offset * cols..(offset + vr) * cols];
                            for (o, s) in dv.iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                    }
                    offset += if *axis == 1 { vc } else { vr };
                }
            }
            Op::Relu(x) => {
                let tx = &nodes[x.0].value;
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((o, gi), xi) in dx.iter_mut().zip(g).zip(tx.values()) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((o, gi), yi) in dx.iter_mut().zip(g).zip(y.values()) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((o, gi), yi) in dx.iter_mut().zip(g).zip(y.values()) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Affine(x, scale) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (o, gi) in dx.iter_mut().zip(g) {
                        *o += gi * scale;
                    }
                }
            }
            Op::SoftmaxColumns(x) => {
                let (r, c) = dims(y);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for j in 0..c {
                        softmax_backward(y.values(), g, dx, c, j, r);
                    }
                }
            }
            Op::SoftmaxBlocks(x, m) => {
                let (r, c) = dims(y);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for row in 0..r {
                        for j in 0..*m {
                            softmax_backward(y.values(), g, dx, *m, row * c + j, *m);
                        }
                    }
                }
            }
            Op::MeanPoolRows(x) => {
                let (r, c) = dims(&nodes[x.0].value);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::MaxPoolRows(x, arg) => {
                let c = nodes[x.0].value.cols();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (j, &i) in arg.iter().enumerate() {
                        dx[i * c + j] += g[j];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::SumCols(x) => {
                let c = nodes[x.0].value.cols();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (i, gi) in g.iter().enumerate() {
                        dx[i * c..(i + 1) * c].iter_mut().for_each(|o| *o += gi);
                    }
                }
            }
            Op::Gather(table, ids) => {
                let c = nodes[table.0].value.cols();
                if let Some(dt) = slot(grads, nodes, *table) {
                    for (k, &id) in ids.iter().enumerate() {
                        for (o, s) in dt[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                        {
                            *o += s;
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let c = nodes[x.0].value.cols();
                let (r, len) = dims(y);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for i in 0..r {
                        for (o, s) in dx[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                        {
                            *o += s;
                        }
                    }
                }
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (&nodes[x.0].value, &nodes[s.0].value);
                let (r, c) = dims(tx);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for i in 0..r {
                        let k = ts.values()[i];
                        for j in 0..c {
                            dx[i * c + j] += g[i * c + j] * k;
                        }
                    }
                }
                if let Some(ds) = slot(grads, nodes, *s) {
                    for i in 0..r {
                        ds[i] += (0..c)
                            .map(|j| g[i * c + j] * tx.values()[i * c + j])
                            .sum::<f64>();
                    }
                }
            }
        }
    }
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::MatMul => "matmul",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "elementwise_mul",
        OpKind::Concat(_) => "concat",
        OpKind::Relu => "relu",
        OpKind::Sigmoid => "sigmoid",
        OpKind::Tanh => "tanh",
        OpKind::SoftmaxColumns => "softmax_columns",
        OpKind::MeanPoolRows => "mean_pool_rows",
        OpKind::MaxPoolRows => "max_pool_rows",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, uniform};
    use alloc::boxed::Box;
    use proptest::prelude::*;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_stream(seed, 99);
        let n = shape.iter().product();
        t(
            shape,
            &(0..n)
                .map(|_| uniform(&mut rng, -1.5, 1.5))
                .collect::<Vec<_>>(),
        )
    }

    /// Central finite differences of `f` over every coordinate of every
    /// input, compared with the tape gradient.
    fn check_grad(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root).unwrap();
        let eval = |xs: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
            let r = f(&mut tape, &vars);
            tape.value(r).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, x) in inputs.iter().enumerate() {
            for i in 0..x.len() {
                let mut plus = inputs.to_vec();
                plus[k].values_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].values_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.get(vars[k]).unwrap().values()[i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn identity_matmul() {
        let a = random(&[3, 3], 1);
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let (i, x) = (tape.constant(eye), tape.constant(a.clone()));
        let y = tape.forward_op(OpKind::MatMul, &[i, x]).unwrap();
        assert_eq!(tape.value(y), &a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let y = tape.forward_op(OpKind::SoftmaxColumns, &[x]).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5; 4]);
    }

    #[test]
    fn mean_pool_by_hand() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let y = tape.forward_op(OpKind::MeanPoolRows, &[x]).unwrap();
        // (1 + 5) / 2, (3 + 7) / 2
        assert_eq!(tape.value(y).values(), &[3.0, 5.0]);
        let m = tape.forward_op(OpKind::MaxPoolRows, &[x]).unwrap();
        assert_eq!(tape.value(m).values(), &[5.0, 7.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!((left, right), (vec![2, 3], vec![2, 3]));
            }
            other => panic!("{other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
        let d = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.concat(&[a, c], 1).is_err());
        assert!(tape.concat(&[a, d], 1).is_ok());
        assert!(matches!(
            tape.forward_op(OpKind::Sum, &[]),
            Err(Error::Empty("sum"))
        ));
        // Only a leading batch dimension broadcasts.
        let e = tape.constant(Tensor::zeros(&[3, 3]));
        let f = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.mul(e, f).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq);
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(Tensor::scalar(4.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::StaleTape)));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..5 {
            let a = random(&[4, 3], seed);
            let b = random(&[3, 5], seed + 100);
            let row = random(&[1, 3], seed + 200);
            let c = random(&[4, 3], seed + 300);
            let w = random(&[4, 1], seed + 400);
            let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
                (
                    "matmul",
                    vec![a.clone(), b.clone()],
                    Box::new(|tp, v| {
                        let y = tp.matmul(v[0], v[1]).unwrap();
                        let s = tp.tanh(y);
                        tp.sum(s)
                    }),
                ),
                (
                    "add_broadcast",
                    vec![a.clone(), row.clone()],
                    Box::new(|tp, v| {
                        let y = tp.add(v[0], v[1]).unwrap();
                        let s = tp.mul(y, y).unwrap();
                        tp.mean(s)
                    }),
                ),
                (
                    "sub_broadcast",
                    vec![row.clone(), a.clone()],
                    Box::new(|tp, v| {
                        let y = tp.sub(v[0], v[1]).unwrap();
                        let s = tp.sigmoid(y);
                        tp.sum(s)
                    }),
                ),
                (
                    "mul",
                    vec![a.clone(), c.clone()],
                    Box::new(|tp, v| {
                        let y = tp.mul(v[0], v[1]).unwrap();
                        let s = tp.tanh(y);
                        tp.sum(s)
                    }),
                ),
                (
                    "concat",
                    vec![a.clone(), c.clone(), row.clone()],
                    Box::new(|tp, v| {
                        let y = tp.concat(&[v[0], v[1]], 1).unwrap();
                        let z = tp.concat(&[v[0], v[2]], 0).unwrap();
                        let (sy, sz) = (tp.sigmoid(y), tp.tanh(z));
                        let (a1, a2) = (tp.sum(sy), tp.mean(sz));
                        tp.mul(a1, a2).unwrap()
                    }),
                ),
                (
                    "relu",
                    vec![a.clone()],
                    Box::new(|tp, v| {
                        let y = tp.relu(v[0]);
                        let s = tp.mul(y, y).unwrap();
                        tp.sum(s)
                    }),
                ),
                (
                    "softmax_columns",
                    vec![a.clone(), c.clone()],
                    Box::new(|tp, v| {
                        let y = tp.softmax_columns(v[0]);
                        let s = tp.mul(y, v[1]).unwrap();
                        tp.sum(s)
                    }),
                ),
                (
                    "softmax_blocks",
                    vec![random(&[3, 4], seed + 7), random(&[3, 4], seed + 8)],
                    Box::new(|tp, v| {
                        let y = tp.softmax_blocks(v[0], 2).unwrap();
                        let s = tp.mul(y, v[1]).unwrap();
                        tp.sum(s)
                    }),
                ),
                (
                    "pools",
                    vec![a.clone(), row.clone()],
                    Box::new(|tp, v| {
                        let m = tp.mean_pool_rows(v[0]);
                        let x = tp.max_pool_rows(v[0]);
                        let p = tp.mul(m, v[1]).unwrap();
                        let q = tp.mul(x, x).unwrap();
                        let (sp, sq) = (tp.sum(p), tp.sum(q));
                        tp.add(sp, sq).unwrap()
                    }),
                ),
                (
                    "sum_cols_scale_rows",
                    vec![a.clone(), w.clone()],
                    Box::new(|tp, v| {
                        let y = tp.scale_rows(v[0], v[1]).unwrap();
                        let r = tp.sum_cols(y);
                        let s = tp.tanh(r);
                        tp.sum(s)
                    }),
                ),
                (
                    "gather_slice_affine",
                    vec![a.clone()],
                    Box::new(|tp, v| {
                        let y = tp.gather(v[0], &[2, 0, 2, 3]).unwrap();
                        let z = tp.slice_cols(y, 1, 2).unwrap();
                        let w = tp.affine(z, -2.0, 0.5);
                        let s = tp.sigmoid(w);
                        tp.sum(s)
                    }),
                ),
            ];
            for (name, inputs, f) in cases {
                let err = check_grad(&inputs, f);
                assert!(err < 1e-4, "{name} seed {seed}: relative error {err}");
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(random(&[5, 4], 3), true);
            let w = tape.leaf(random(&[4, 2], 4), true);
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax_columns(y);
            let l = tape.sum(s);
            let sq = tape.mul(s, s).unwrap();
            let l2 = tape.mean(sq);
            let root = tape.add(l, l2).unwrap();
            let g = tape.backward(root).unwrap();
            (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.0), bits(&b.0));
        assert_eq!(bits(&a.1), bits(&b.1));
    }

    proptest! {
        #[test]
        fn softmax_columns_are_distributions(values in prop::collection::vec(-10.0f64..10.0, 12)) {
            let mut tape = Tape::new();
            let x = tape.constant(t(&[4, 3], &values));
            let y = tape.softmax_columns(x);
            let out = tape.value(y);
            for j in 0..3 {
                let col: f64 = (0..4).map(|i| out.get(i, j)).sum();
                prop_assert!((col - 1.0).abs() < 1e-6);
            }
            prop_assert!(out.values().iter().all(|&p| p > 0.0 && p < 1.0));
        }

        #[test]
        fn pooling_is_permutation_invariant(values in prop::collection::vec(-5.0f64..5.0, 15), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let x = t(&[5, 3], &values);
            let mut order: Vec<usize> = (0..5).collect();
            order.shuffle(&mut rng_stream(seed, 0));
            let permuted: Vec<f64> = order.iter().flat_map(|&r| x.row(r).to_vec()).collect();
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(x.clone()), tape.constant(t(&[5, 3], &permuted)));
            let (ma, mb) = (tape.mean_pool_rows(a), tape.mean_pool_rows(b));
            let (xa, xb) = (tape.max_pool_rows(a), tape.max_pool_rows(b));
            prop_assert_eq!(tape.value(xa), tape.value(xb));
            for (p, q) in tape.value(ma).values().iter().zip(tape.value(mb).values()) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }
}
