//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Graph`] records every primitive as a node appended after its inputs,
//! so walking the node list backwards is a valid topological order. Values
//! are immutable once recorded. Gradients live on the graph and accumulate
//! across [`Graph::backward`] calls until [`Graph::zero_grad`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Floor applied to probabilities before taking a logarithm in
/// [`Graph::soft_cross_entropy_rows`].
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `rows.len() × width` matrix.
    /// An empty slice gives a `0 × width` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            let r = r.as_ref();
            if r.len() != width {
                return Err(shape_err("from_rows", &[width], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), width, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRows(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    SoftCrossEntropyRows { target: Var, pred: Var },
    RowSqDist(Var, Var),
    FrobeniusNorm(Var),
    GatherRows { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn for_each_slice(shape: &[usize], axis: usize, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut it = (0..len).map(move |k| base + k * inner);
            f(&mut it);
        }
    }
}

/// Flat indices of every 1-D slice along `axis`.
fn slices(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for_each_slice(shape, axis, |it| out.push(it.collect()));
    out
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies `v` into a new constant; nothing upstream of `v` sees gradient
    /// through the copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, `None` when no backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                detail: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        let s = self.value(v).shape();
        if axis >= s.len() {
            return Err(Error::Shape {
                op,
                detail: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x[m×n] + bias[n]`, the bias added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", x)?;
        let bs = self.value(bias).shape();
        if bs != [n] {
            return Err(shape_err("add_row", &[m, n], bs));
        }
        let (tx, tb) = (self.value(x), self.value(bias));
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n.max(1)).take(m) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(x, bias), rg))
    }

    /// Scales row `i` of `x[m×n]` by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("mul_rows", x)?;
        let ws = self.value(w).shape();
        if ws != [m] {
            return Err(shape_err("mul_rows", &[m, n], ws));
        }
        let (tx, tw) = (self.value(x), self.value(w));
        let mut data = tx.data.clone();
        for (i, row) in data.chunks_mut(n.max(1)).take(m).enumerate() {
            let s = tw.data[i];
            row.iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MulRows(x, w), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", &[m, k], &[k2, n]));
        }
        let (ta, tb) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ta[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", x)?;
        let t = &self.value(x).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, libm::exp, Op::Exp(x))
    }

    /// Natural log without clamping.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, libm::log, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all entries; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel();
        let s: f64 = t.data.iter().sum();
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let mut shape = t.shape.clone();
        shape.remove(axis);
        let mut out = Vec::new();
        for_each_slice(&t.shape, axis, |it| out.push(it.map(|i| t.data[i]).sum()));
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumAxis(x, axis), rg))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let mut out = vec![0.0; t.numel()];
        for idx in slices(&t.shape, axis) {
            let max = idx.iter().map(|&i| t.data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in &idx {
                let e = libm::exp(t.data[i] - max);
                out[i] = e;
                z += e;
            }
            for &i in &idx {
                out[i] /= z;
            }
        }
        let value = Tensor::new(t.shape.clone(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let t = self.value(x);
        let mut out = vec![0.0; t.numel()];
        for idx in slices(&t.shape, axis) {
            let max = idx.iter().map(|&i| t.data[i]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = idx.iter().map(|&i| libm::exp(t.data[i] - max)).sum();
            let lz = max + libm::log(z);
            for &i in &idx {
                out[i] = t.data[i] - lz;
            }
        }
        let value = Tensor::new(t.shape.clone(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax(x, axis), rg))
    }

    /// Scales every slice along `axis` to unit Euclidean norm. A zero-norm
    /// slice is rejected.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let t = self.value(x);
        let mut out = vec![0.0; t.numel()];
        let mut norms = Vec::new();
        for idx in slices(&t.shape, axis) {
            let n = libm::sqrt(idx.iter().map(|&i| t.data[i] * t.data[i]).sum::<f64>());
            if !(n > 0.0) {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    detail: format!("slice {} has zero norm", norms.len()),
                });
            }
            for &i in &idx {
                out[i] = t.data[i] / n;
            }
            norms.push(n);
        }
        let value = Tensor::new(t.shape.clone(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::L2Normalize { x, axis, norms }, rg))
    }

    /// Cosine similarity of two nonzero vectors, as a scalar.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_sim", a, b)?;
        if self.value(a).shape().len() != 1 {
            return Err(Error::Shape {
                op: "cosine_sim",
                detail: format!("expected vectors, got {:?}", self.value(a).shape()),
            });
        }
        let na = self.l2_normalize(a, 0)?;
        let nb = self.l2_normalize(b, 0)?;
        let p = self.mul(na, nb)?;
        Ok(self.sum(p))
    }

    /// Pairwise cosine similarities `rows(a) × rows(b)`.
    pub fn cosine_sim_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, da) = self.matrix_dims("cosine_sim_matrix", a)?;
        let (_, db) = self.matrix_dims("cosine_sim_matrix", b)?;
        if da != db {
            return Err(shape_err("cosine_sim_matrix", self.value(a).shape(), self.value(b).shape()));
        }
        let na = self.l2_normalize(a, 1)?;
        let nb = self.l2_normalize(b, 1)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    /// Per-row `−Σ target·log(max(pred, LOG_CLAMP))` over the last axis.
    /// `target` is treated as a constant even when it requires grad.
    /// A vector is a single row.
    pub fn soft_cross_entropy_rows(&mut self, target: Var, pred: Var) -> Result<Var> {
        self.same_shape("soft_cross_entropy", target, pred)?;
        let (tt, tp) = (self.value(target), self.value(pred));
        let cols = tt.cols();
        let rows = if tt.shape.is_empty() { 1 } else { tt.numel() / cols.max(1) };
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut s = 0.0;
            for c in 0..cols {
                let i = r * cols + c;
                s -= tt.data[i] * libm::log(tp.data[i].max(LOG_CLAMP));
            }
            out.push(s);
        }
        let rg = self.rg(pred);
        Ok(self.push(Tensor::vector(out), Op::SoftCrossEntropyRows { target, pred }, rg))
    }

    /// `−Σ target·log(pred)` summed over every row.
    pub fn soft_cross_entropy(&mut self, target: Var, pred: Var) -> Result<Var> {
        let rows = self.soft_cross_entropy_rows(target, pred)?;
        Ok(self.sum(rows))
    }

    /// Squared Euclidean distance between matching rows of two matrices.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_sq_dist", a, b)?;
        let (m, n) = self.matrix_dims("row_sq_dist", a)?;
        let (ta, tb) = (&self.value(a).data, &self.value(b).data);
        let out = (0..m)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let d = ta[i * n + j] - tb[i * n + j];
                        d * d
                    })
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::vector(out), Op::RowSqDist(a, b), rg))
    }

    /// Frobenius (entrywise Euclidean) norm. Its gradient at zero is taken
    /// to be zero.
    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let n = libm::sqrt(self.value(x).data.iter().map(|v| v * v).sum::<f64>());
        let rg = self.rg(x);
        self.push(Tensor::scalar(n), Op::FrobeniusNorm(x), rg)
    }

    /// Selects rows `ids` of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("gather_rows", table)?;
        let t = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::Lookup { kind: "row", id });
            }
            out.extend_from_slice(&t[id * n..(id + 1) * n]);
        }
        let rg = self.rg(table);
        let value = Tensor::matrix(ids.len(), n, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`. Gradients add onto any
    /// left by earlier passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value.data;
        // Adds `f(i)` into the gradient buffer of `v` when `v` is on a grad path.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (da, db) = (&val(a).data, &val(b).data);
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * db[i];
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * da[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddRow(x, b) => {
                let n = val(b).numel();
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                acc(b, &mut |gb| {
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::MulRows(x, w) => {
                let (tx, tw) = (val(x), val(w));
                let n = tx.cols();
                acc(x, &mut |gx| {
                    for (i, &s) in tw.data.iter().enumerate() {
                        for j in 0..n {
                            gx[i * n + j] += g[i * n + j] * s;
                        }
                    }
                });
                acc(w, &mut |gw| {
                    for (i, gwi) in gw.iter_mut().enumerate() {
                        *gwi += (0..n).map(|j| g[i * n + j] * tx.data[i * n + j]).sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                acc(a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            gbrow.iter_mut().zip(grow).for_each(|(x, y)| *x += av * y);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (val(x).shape[0], val(x).shape[1]);
                acc(x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Exp(x) => acc(x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * out[i];
                }
            }),
            Op::Log(x) => {
                let tx = &val(x).data;
                acc(x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / tx[i];
                    }
                });
            }
            Op::Tanh(x) => acc(x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Relu(x) => {
                let tx = &val(x).data;
                acc(x, &mut |gx| {
                    for i in 0..gx.len() {
                        if tx[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => acc(x, &mut |gx| {
                let n = gx.len() as f64;
                gx.iter_mut().for_each(|v| *v += g[0] / n);
            }),
            Op::SumAxis(x, axis) => {
                let shape = &val(x).shape;
                acc(x, &mut |gx| {
                    let mut k = 0;
                    for_each_slice(shape, axis, |it| {
                        for i in it {
                            gx[i] += g[k];
                        }
                        k += 1;
                    });
                });
            }
            Op::Softmax(x, axis) => {
                let shape = &val(x).shape;
                acc(x, &mut |gx| {
                    for idx in slices(shape, axis) {
                        let dot: f64 = idx.iter().map(|&i| g[i] * out[i]).sum();
                        for &i in &idx {
                            gx[i] += out[i] * (g[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let shape = &val(x).shape;
                acc(x, &mut |gx| {
                    for idx in slices(shape, axis) {
                        let gs: f64 = idx.iter().map(|&i| g[i]).sum();
                        for &i in &idx {
                            gx[i] += g[i] - libm::exp(out[i]) * gs;
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, ref norms } => {
                let shape = &val(x).shape;
                acc(x, &mut |gx| {
                    for (idx, &n) in slices(shape, axis).iter().zip(norms) {
                        let dot: f64 = idx.iter().map(|&i| g[i] * out[i]).sum();
                        for &i in idx {
                            gx[i] += (g[i] - out[i] * dot) / n;
                        }
                    }
                });
            }
            Op::SoftCrossEntropyRows { target, pred } => {
                let (tt, tp) = (&val(target).data, &val(pred).data);
                let cols = val(pred).cols().max(1);
                acc(pred, &mut |gp| {
                    for i in 0..gp.len() {
                        if tp[i] > LOG_CLAMP {
                            gp[i] -= g[i / cols] * tt[i] / tp[i];
                        }
                    }
                });
            }
            Op::RowSqDist(a, b) => {
                let (ta, tb) = (&val(a).data, &val(b).data);
                let n = val(a).cols().max(1);
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += 2.0 * g[i / n] * (ta[i] - tb[i]);
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= 2.0 * g[i / n] * (ta[i] - tb[i]);
                    }
                });
            }
            Op::FrobeniusNorm(x) => {
                let tx = &val(x).data;
                let n = out[0];
                if n > 0.0 {
                    acc(x, &mut |gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[0] * tx[i] / n;
                        }
                    });
                }
            }
            Op::GatherRows { table, ref ids } => {
                let n = val(table).cols();
                acc(table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            gt[id * n + j] += g[r * n + j];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_hand_cases() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let p = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 1]);
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_analytic_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![0.0, libm::log(3.0)]));
        let s = g.softmax(x, 0).unwrap();
        assert!(close(g.value(s).data()[0], 0.25, 1e-15));
        assert!(close(g.value(s).data()[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_bad_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0]));
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_along_axis_zero_of_matrix() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 1.0, 0.0, -1.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let d = g.value(s).data();
        for c in 0..3 {
            assert!(close(d[c] + d[3 + c], 1.0, 1e-12));
        }
        assert!(close(d[0], 0.5, 1e-15));
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = g.l2_normalize(x, 0).unwrap();
        assert!(close(g.value(n).data()[0], 0.6, 1e-15));
        assert!(close(g.value(n).data()[1], 0.8, 1e-15));

        let u = g.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let n = g.l2_normalize(u, 0).unwrap();
        assert_eq!(g.value(n).data(), &[0.0, 1.0, 0.0]);

        let z = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        assert!(matches!(g.l2_normalize(z, 1), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn cosine_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0, -1.0]));
        let s = g.cosine_sim(a, a).unwrap();
        assert!(close(g.value(s).item(), 1.0, 1e-15));
        let b = g.constant(Tensor::vector(vec![2.0, -1.0, 0.0]));
        let s = g.cosine_sim(a, b).unwrap();
        assert!(close(g.value(s).item(), 0.0, 1e-15));
        let z = g.constant(Tensor::vector(vec![0.0; 3]));
        assert!(g.cosine_sim(a, z).is_err());
    }

    #[test]
    fn soft_cross_entropy_cases() {
        let mut g = Graph::new();
        let k = 4;
        let u = g.constant(Tensor::vector(vec![0.25; k]));
        let ce = g.soft_cross_entropy(u, u).unwrap();
        assert!(close(g.value(ce).item(), libm::log(k as f64), 1e-15));

        let one_hot = g.constant(Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]));
        let ce = g.soft_cross_entropy(one_hot, one_hot).unwrap();
        assert!(close(g.value(ce).item(), 0.0, 1e-15));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // second pass accumulates
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constant_loss_has_no_grads() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(s).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 3.0);
        let d = g.detach(y);
        let z = g.mul(d, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        // only the direct path: d/dx (d*x) with d constant = d = 3x
        assert_eq!(g.grad(x).unwrap(), &[3.0, 6.0]);
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn sum_axis_and_gather() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let rows = g.gather_rows(t, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let rs = g.sum_axis(rows, 1).unwrap();
        assert_eq!(g.value(rs).data(), &[11.0, 3.0, 11.0]);
        let s = g.sum(rs);
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(g.gather_rows(t, &[3]), Err(Error::Lookup { .. })));
    }

    #[test]
    fn empty_batch_passes_through() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![0, 4]));
        let w = g.constant(Tensor::zeros(vec![4, 3]));
        let y = g.matmul(x, w).unwrap();
        assert_eq!(g.value(y).shape(), &[0, 3]);
        let n = g.l2_normalize(y, 1).unwrap();
        assert_eq!(g.value(n).numel(), 0);
    }
}
