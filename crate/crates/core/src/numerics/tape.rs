//! Reverse-mode differentiation over a closed set of matrix operations.
//!
//! A [`Tape`] records every operation together with its forward value.
//! [`Tape::backward`] walks the record in reverse and returns adjoints for
//! every node that requires a gradient. Nodes built only from constants are
//! marked as not requiring gradients and are skipped entirely.

use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, Axis};
use super::matrix::Matrix;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log { x: usize, eps: f64 },
    Softmax { x: usize, axis: Axis },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Matrix, sigma: Vec<f64> },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    MaxPoolCols { x: usize, argmax: Vec<usize> },
    MeanCols(usize),
    SumAll(usize),
    GatherCols { table: usize, ids: Vec<usize> },
    Reshape(usize),
    CrossEntropyRows { logits: usize, labels: Vec<usize>, probs: Matrix, eps: f64 },
    SumSquares(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// require a gradient or is not on the differentiated tape.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.adjoints.get(v.idx).and_then(|a| a.as_ref())
    }
}

fn add_into(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("tape"));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a leaf. Leaves with `requires_grad` receive adjoints.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Matrix> {
        let i = self.idx(v)?;
        Ok(&self.nodes[i].value)
    }

    /// The scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v)?
            .item()
            .ok_or_else(|| Error::shape("scalar", "node is not 1x1"))
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.rg(self.idx(v)?))
    }

    fn unary(&mut self, x: Var, f: impl FnOnce(&Matrix) -> Result<Matrix>, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let i = self.idx(x)?;
        let value = f(&self.nodes[i].value)?;
        let rg = self.rg(i);
        self.push(value, op(i), rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let value = f(&self.nodes[i].value, &self.nodes[j].value)?;
        let rg = self.rg(i) || self.rg(j);
        self.push(value, op(i, j), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.add(y), Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.sub(y), Op::Sub)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.zip_map(y, "mul", |p, q| p * q), Op::Mul)
    }

    /// Adds the `rows × 1` column `b` to every column of `x`.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        self.binary(
            x,
            b,
            |x, b| {
                if b.shape() != (x.rows(), 1) {
                    return Err(Error::shape("add_col", format!("{:?} onto {:?}", b.shape(), x.shape())));
                }
                Ok(kernels::add_col(x, b))
            },
            Op::AddCol,
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |m| Ok(m.scale(c)), |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |m| Ok(m.map(|v| v + c)), Op::AddScalar)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |m| Ok(m.transpose()), Op::Transpose)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |m| Ok(m.map(|v| v.max(0.0))), Op::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |m| Ok(m.map(kernels::gelu)), Op::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |m| Ok(m.map(|v| 1.0 / (1.0 + (-v).exp()))), Op::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |m| Ok(m.map(f64::exp)), Op::Exp)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(x, |m| Ok(m.map(|v| v.max(eps).ln())), |i| Op::Log { x: i, eps })
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        self.softmax_masked(x, axis, false)
    }

    /// Softmax with an optional causal mask (see [`kernels::softmax_masked`]).
    pub fn softmax_masked(&mut self, x: Var, axis: Axis, causal: bool) -> Result<Var> {
        self.unary(
            x,
            |m| kernels::softmax_masked(m, axis, causal),
            |i| Op::Softmax { x: i, axis },
        )
    }

    /// Column-wise LayerNorm with scalar (1×1) gain and shift nodes.
    pub fn layer_norm_cols(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
        let (i, g, b) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let gv = self.scalar(gamma)?;
        let bv = self.scalar(beta)?;
        let (value, xhat, sigma) = kernels::layer_norm_cols(&self.nodes[i].value, gv, bv, epsilon)?;
        let rg = self.rg(i) || self.rg(g) || self.rg(b);
        self.push(
            value,
            Op::LayerNorm { x: i, gamma: g, beta: b, xhat, sigma },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|v| self.idx(*v)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = idx.iter().map(|i| &self.nodes[*i].value).collect();
        let value = Matrix::hconcat(&refs)?;
        let rg = idx.iter().any(|i| self.rg(*i));
        self.push(value, Op::ConcatCols(idx), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|v| self.idx(*v)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = self.nodes[*first].value.cols();
        if idx.iter().any(|i| self.nodes[*i].value.cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for i in &idx {
            data.extend_from_slice(self.nodes[*i].value.data());
        }
        let rows = data.len() / cols.max(1);
        let value = Matrix::from_raw(rows, cols, data);
        let rg = idx.iter().any(|i| self.rg(*i));
        self.push(value, Op::ConcatRows(idx), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(x, |m| m.cols_range(start, len), |i| Op::SliceCols { x: i, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(
            x,
            |m| {
                if start + len > m.rows() {
                    return Err(Error::shape("slice_rows", format!("[{start}, {}) of {} rows", start + len, m.rows())));
                }
                Ok(Matrix::from_raw(len, m.cols(), m.data()[start * m.cols()..(start + len) * m.cols()].to_vec()))
            },
            |i| Op::SliceRows { x: i, start },
        )
    }

    /// Element-wise maximum over columns, giving a `rows × 1` column.
    /// Ties route the gradient to the first maximal column.
    pub fn max_pool_cols(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let m = &self.nodes[i].value;
        if m.cols() == 0 {
            return Err(Error::Empty("max_pool_cols"));
        }
        let mut argmax = Vec::with_capacity(m.rows());
        let mut out = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let row = m.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let value = Matrix::from_raw(m.rows(), 1, out);
        let rg = self.rg(i);
        self.push(value, Op::MaxPoolCols { x: i, argmax }, rg)
    }

    /// Mean over columns, giving a `rows × 1` column.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |m| {
                if m.cols() == 0 {
                    return Err(Error::Empty("mean_cols"));
                }
                let n = m.cols() as f64;
                Ok(Matrix::from_raw(
                    m.rows(),
                    1,
                    (0..m.rows()).map(|r| m.row(r).iter().sum::<f64>() / n).collect(),
                ))
            },
            Op::MeanCols,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |m| Ok(Matrix::from_raw(1, 1, vec![m.data().iter().sum()])), Op::SumAll)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.len();
        if n == 0 {
            return Err(Error::Empty("mean_all"));
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Selects columns of `table` by index (embedding lookup).
    pub fn gather_cols(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let i = self.idx(table)?;
        let t = &self.nodes[i].value;
        if let Some(bad) = ids.iter().find(|id| **id >= t.cols()) {
            return Err(Error::Data(format!("token id {bad} outside a table of {} entries", t.cols())));
        }
        let value = Matrix::from_fn(t.rows(), ids.len(), |r, c| t.get(r, ids[c]));
        let rg = self.rg(i);
        self.push(value, Op::GatherCols { table: i, ids: ids.to_vec() }, rg)
    }

    /// Row-major reinterpretation with the same number of entries.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        self.unary(
            x,
            |m| {
                if m.len() != rows * cols {
                    return Err(Error::shape("reshape", format!("{:?} into {rows}x{cols}", m.shape())));
                }
                Ok(Matrix::from_raw(rows, cols, m.data().to_vec()))
            },
            Op::Reshape,
        )
    }

    /// Mean over rows of the categorical cross-entropy `-ln max(softmax(row)[label], eps)`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let i = self.idx(logits)?;
        let z = &self.nodes[i].value;
        if labels.len() != z.rows() || z.rows() == 0 {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("{} labels for {} rows", labels.len(), z.rows()),
            ));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= z.cols()) {
            return Err(Error::Data(format!("class {bad} out of range 0..{}", z.cols())));
        }
        let probs = kernels::softmax(z, Axis::Rows)?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, l)| -probs.get(r, *l).max(eps).ln())
            .sum::<f64>()
            / z.rows() as f64;
        let rg = self.rg(i);
        self.push(
            Matrix::from_raw(1, 1, vec![loss]),
            Op::CrossEntropyRows { logits: i, labels: labels.to_vec(), probs, eps },
            rg,
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |m| Ok(Matrix::from_raw(1, 1, vec![m.data().iter().map(|v| v * v).sum()])),
            Op::SumSquares,
        )
    }

    /// Reverse pass from a 1×1 loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.shape() != (1, 1) {
            return Err(Error::shape("backward", "loss must be 1x1"));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root + 1];
        if self.rg(root) {
            adj[root] = Some(Matrix::filled(1, 1, 1.0));
        }
        for k in (0..=root).rev() {
            let Some(g) = adj[k].take() else { continue };
            self.propagate(k, &g, &mut adj);
            adj[k] = Some(g);
        }
        for (k, slot) in adj.iter_mut().enumerate() {
            if !self.rg(k) {
                *slot = None;
            }
        }
        Ok(Gradients {
            tape: self.id,
            adjoints: adj,
        })
    }

    fn propagate(&self, k: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[k];
        let val = |i: usize| &self.nodes[i].value;
        let mut send = |i: usize, grad: Matrix| {
            if self.nodes[i].requires_grad {
                add_into(&mut adj[i], grad);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul(&val(*b).transpose()).expect("shapes recorded"));
                }
                if self.rg(*b) {
                    send(*b, val(*a).transpose().matmul(g).expect("shapes recorded"));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.zip_map(val(*b), "mul", |p, q| p * q).expect("shapes recorded"));
                }
                if self.rg(*b) {
                    send(*b, g.zip_map(val(*a), "mul", |p, q| p * q).expect("shapes recorded"));
                }
            }
            Op::AddCol(x, b) => {
                send(*x, g.clone());
                if self.rg(*b) {
                    let sums = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    send(*b, Matrix::from_raw(g.rows(), 1, sums));
                }
            }
            Op::Scale(x, c) => send(*x, g.scale(*c)),
            Op::AddScalar(x) => send(*x, g.clone()),
            Op::Transpose(x) => send(*x, g.transpose()),
            Op::Relu(x) => send(
                *x,
                g.zip_map(val(*x), "relu", |d, v| if v > 0.0 { d } else { 0.0 }).expect("shapes recorded"),
            ),
            Op::Gelu(x) => send(
                *x,
                g.zip_map(val(*x), "gelu", |d, v| d * kernels::gelu_grad(v)).expect("shapes recorded"),
            ),
            Op::Sigmoid(x) => send(
                *x,
                g.zip_map(&node.value, "sigmoid", |d, y| d * y * (1.0 - y)).expect("shapes recorded"),
            ),
            Op::Exp(x) => send(*x, g.zip_map(&node.value, "exp", |d, y| d * y).expect("shapes recorded")),
            Op::Log { x, eps } => send(
                *x,
                g.zip_map(val(*x), "log", |d, v| if v > *eps { d / v } else { 0.0 }).expect("shapes recorded"),
            ),
            Op::Softmax { x, axis } => send(*x, softmax_backward(&node.value, g, *axis)),
            Op::LayerNorm { x, gamma, beta, xhat, sigma } => {
                let gv = self.nodes[*gamma].value.data()[0];
                if self.rg(*beta) {
                    send(*beta, Matrix::from_raw(1, 1, vec![g.data().iter().sum()]));
                }
                if self.rg(*gamma) {
                    let s = g.data().iter().zip(xhat.data()).map(|(a, b)| a * b).sum();
                    send(*gamma, Matrix::from_raw(1, 1, vec![s]));
                }
                if self.rg(*x) {
                    send(*x, layer_norm_backward(g, xhat, sigma, gv));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.rg(*p) {
                        send(*p, g.cols_range(offset, w).expect("shapes recorded"));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = val(*p).shape();
                    if self.rg(*p) {
                        send(*p, Matrix::from_raw(r, c, g.data()[offset * c..(offset + r) * c].to_vec()));
                    }
                    offset += r;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).shape();
                let mut full = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        full.set(i, start + j, g.get(i, j));
                    }
                }
                send(*x, full);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = val(*x).shape();
                let mut full = Matrix::zeros(r, c);
                full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*x, full);
            }
            Op::MaxPoolCols { x, argmax } => {
                let (r, c) = val(*x).shape();
                let mut full = Matrix::zeros(r, c);
                for (row, col) in argmax.iter().enumerate() {
                    full.set(row, *col, g.get(row, 0));
                }
                send(*x, full);
            }
            Op::MeanCols(x) => {
                let (r, c) = val(*x).shape();
                send(*x, Matrix::from_fn(r, c, |i, _| g.get(i, 0) / c as f64));
            }
            Op::SumAll(x) => {
                let (r, c) = val(*x).shape();
                send(*x, Matrix::filled(r, c, g.data()[0]));
            }
            Op::GatherCols { table, ids } => {
                let (r, c) = val(*table).shape();
                let mut full = Matrix::zeros(r, c);
                for (j, id) in ids.iter().enumerate() {
                    for i in 0..r {
                        full.set(i, *id, full.get(i, *id) + g.get(i, j));
                    }
                }
                send(*table, full);
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                send(*x, Matrix::from_raw(r, c, g.data().to_vec()));
            }
            Op::CrossEntropyRows { logits, labels, probs, eps } => {
                let n = labels.len() as f64;
                let scale = g.data()[0] / n;
                let mut grad = Matrix::zeros(probs.rows(), probs.cols());
                for (r, l) in labels.iter().enumerate() {
                    if probs.get(r, *l) <= *eps {
                        continue;
                    }
                    for c in 0..probs.cols() {
                        let onehot = if c == *l { 1.0 } else { 0.0 };
                        grad.set(r, c, scale * (probs.get(r, c) - onehot));
                    }
                }
                send(*logits, grad);
            }
            Op::SumSquares(x) => {
                let d = g.data()[0];
                send(*x, val(*x).map(|v| 2.0 * v * d));
            }
        }
    }
}

fn softmax_backward(y: &Matrix, g: &Matrix, axis: Axis) -> Matrix {
    let (rows, cols) = y.shape();
    let mut out = Matrix::zeros(rows, cols);
    match axis {
        Axis::Rows => {
            for r in 0..rows {
                let dot: f64 = (0..cols).map(|c| g.get(r, c) * y.get(r, c)).sum();
                for c in 0..cols {
                    out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                }
            }
        }
        Axis::Cols => {
            for c in 0..cols {
                let dot: f64 = (0..rows).map(|r| g.get(r, c) * y.get(r, c)).sum();
                for r in 0..rows {
                    out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                }
            }
        }
    }
    out
}

fn layer_norm_backward(g: &Matrix, xhat: &Matrix, sigma: &[f64], gamma: f64) -> Matrix {
    let (rows, cols) = g.shape();
    let n = rows as f64;
    let mut out = Matrix::zeros(rows, cols);
    for c in 0..cols {
        if sigma[c] == 0.0 {
            continue;
        }
        let mean_g = (0..rows).map(|r| gamma * g.get(r, c)).sum::<f64>() / n;
        let mean_gx = (0..rows).map(|r| gamma * g.get(r, c) * xhat.get(r, c)).sum::<f64>() / n;
        for r in 0..rows {
            let v = (gamma * g.get(r, c) - mean_g - xhat.get(r, c) * mean_gx) / sigma[c];
            out.set(r, c, v);
        }
    }
    out
}
