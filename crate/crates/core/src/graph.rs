//! Minimal reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Graph`] is an append-only tape: every [`Op`] application records a
//! node holding the op, its input node ids, and the computed value, so the
//! tape is in topological order by construction. [`Graph::backward`] walks
//! the tape in reverse from a scalar root and accumulates adjoints into
//! every `requires_grad` leaf.
//!
//! The op set is exactly what the networks and losses in this crate need:
//! elementwise arithmetic, matmul with row-broadcast bias, relu, clamped
//! log, row softmax, row reductions (sum / max / L2 norm), global sum and
//! mean, grouped mean-pooling, row gather/concat, and a gradient-reversal
//! op (identity forward, `-beta * grad` backward).
//!
//! Every op validates shapes up front and checks its output for NaN/Inf,
//! so a finite-input graph either holds finite values everywhere or the
//! offending op reports a [`Error::NonFinite`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied inside `log`: `log(x)` computes `ln(max(x, LOG_EPS))`.
/// Protects entropy-style losses at simplex boundaries without touching
/// softmax normalization.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`]. Only valid for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// Differentiable operations.
#[derive(Debug, Clone)]
pub enum Op {
    /// Elementwise `a + b`; shapes must match.
    Add,
    /// Elementwise `a - b`.
    Sub,
    /// Elementwise `a * b`.
    Mul,
    /// Elementwise `a / b`.
    Div,
    /// `x + c` for a fixed scalar.
    AddScalar(f64),
    /// `x * c` for a fixed scalar.
    MulScalar(f64),
    /// `max(x, 0)`; subgradient 0 at 0.
    Relu,
    /// `ln(max(x, LOG_EPS))`.
    Log,
    /// `[n,k] x [k,m] -> [n,m]`.
    MatMul,
    /// `[n,c] + [c]` broadcast over rows (bias add).
    AddRow,
    /// `[n,c] / [n]` broadcast over columns (per-row scaling).
    DivCol,
    /// Row-wise stable softmax on `[n,c]`.
    SoftmaxRows,
    /// Per-row L2 norm, `[n,c] -> [n]`.
    L2NormRows,
    /// Per-row sum, `[n,c] -> [n]`.
    RowSum,
    /// Per-row max, `[n,c] -> [n]`; ties resolve to the lowest index.
    RowMax,
    /// Sum of all elements, `-> [1]`.
    Sum,
    /// Mean of all elements, `-> [1]`.
    Mean,
    /// Mean over consecutive groups of `t` rows: `[n*t,c] -> [n,c]`.
    MeanPoolRows(usize),
    /// Select rows by index (duplicates allowed): `[n,c] -> [len,c]`.
    GatherRows(Vec<usize>),
    /// Stack inputs vertically; all must share the column count.
    ConcatRows,
    /// Stack inputs horizontally; all must share the row count.
    ConcatCols,
    /// Reinterpret the flat buffer under a new shape of equal size.
    Reshape(Vec<usize>),
    /// Identity forward; backward multiplies the upstream gradient by
    /// `-beta` exactly.
    GradReverse(f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Relu => "relu",
            Op::Log => "log",
            Op::MatMul => "matmul",
            Op::AddRow => "add_row",
            Op::DivCol => "div_col",
            Op::SoftmaxRows => "softmax_rows",
            Op::L2NormRows => "l2_norm_rows",
            Op::RowSum => "row_sum",
            Op::RowMax => "row_max",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanPoolRows(_) => "mean_pool_rows",
            Op::GatherRows(_) => "gather_rows",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::Reshape(_) => "reshape",
            Op::GradReverse(_) => "grad_reverse",
        }
    }
}

enum NodeKind {
    Leaf { requires_grad: bool },
    Op(Op),
}

struct Node {
    kind: NodeKind,
    inputs: Vec<VarId>,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c)),
        other => Err(Error::shape(op, format!("expected 2-D input, got {other:?}"))),
    }
}

fn dims1(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape {
        [n] => Ok(*n),
        other => Err(Error::shape(op, format!("expected 1-D input, got {other:?}"))),
    }
}

/// Index of the row maximum, lowest index on ties.
fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Record a differentiable leaf from raw parts.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<VarId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true))
    }

    /// Record a non-differentiable leaf from raw parts.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<VarId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<VarId> {
        self.constant(vec![1], vec![v])
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            kind: NodeKind::Leaf { requires_grad },
            inputs: Vec::new(),
            shape,
            value,
            needs_grad: requires_grad,
        });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    /// Adjoint of a node after [`Graph::backward`]; `None` if no gradient
    /// flowed there (constants, or nodes past the root).
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Copy the adjoint of `id` into `t.grad`.
    pub fn attach_grad(&self, id: VarId, t: &mut Tensor) -> Result<()> {
        match self.grads[id.0].as_ref() {
            Some(g) => t.set_grad(g.clone()),
            None => t.set_grad(vec![0.0; t.numel()]),
        }
    }

    fn check_id(&self, op: &'static str, id: VarId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::arg(op, format!("node id {} not in this graph", id.0)));
        }
        Ok(())
    }

    /// Apply an op to existing nodes, recording the result on the tape.
    pub fn apply(&mut self, op: Op, inputs: &[VarId]) -> Result<VarId> {
        for &id in inputs {
            self.check_id(op.name(), id)?;
        }
        let views: Vec<(&[usize], &[f64])> = inputs
            .iter()
            .map(|&id| (self.nodes[id.0].shape.as_slice(), self.nodes[id.0].value.as_slice()))
            .collect();
        let (shape, value) = forward(&op, &views)?;
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("output of op {}", op.name())));
        }
        let needs_grad = inputs.iter().any(|&id| self.nodes[id.0].needs_grad);
        self.nodes.push(Node {
            kind: NodeKind::Op(op),
            inputs: inputs.to_vec(),
            shape,
            value,
            needs_grad,
        });
        self.grads.push(None);
        Ok(VarId(self.nodes.len() - 1))
    }

    // ── convenience wrappers ───────────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> Result<VarId> {
        self.apply(Op::AddScalar(c), &[x])
    }

    pub fn mul_scalar(&mut self, x: VarId, c: f64) -> Result<VarId> {
        self.apply(Op::MulScalar(c), &[x])
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn log(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::Log, &[x])
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add_row(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        self.apply(Op::AddRow, &[a, bias])
    }

    pub fn div_col(&mut self, a: VarId, denom: VarId) -> Result<VarId> {
        self.apply(Op::DivCol, &[a, denom])
    }

    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::SoftmaxRows, &[x])
    }

    pub fn l2_norm_rows(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::L2NormRows, &[x])
    }

    pub fn row_sum(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::RowSum, &[x])
    }

    pub fn row_max(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::RowMax, &[x])
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: VarId) -> Result<VarId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn mean_pool_rows(&mut self, x: VarId, t: usize) -> Result<VarId> {
        self.apply(Op::MeanPoolRows(t), &[x])
    }

    pub fn gather_rows(&mut self, x: VarId, idx: Vec<usize>) -> Result<VarId> {
        self.apply(Op::GatherRows(idx), &[x])
    }

    pub fn concat_rows(&mut self, inputs: &[VarId]) -> Result<VarId> {
        self.apply(Op::ConcatRows, inputs)
    }

    pub fn concat_cols(&mut self, inputs: &[VarId]) -> Result<VarId> {
        self.apply(Op::ConcatCols, inputs)
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        self.apply(Op::Reshape(shape), &[x])
    }

    pub fn grad_reverse(&mut self, x: VarId, beta: f64) -> Result<VarId> {
        self.apply(Op::GradReverse(beta), &[x])
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Afterwards every `requires_grad`
    /// leaf holds `d(root)/d(leaf)` (zeros if the root does not depend on
    /// it).
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        self.check_id("backward", root)?;
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::arg(
                "backward",
                format!("root must be scalar, got shape {:?}", self.nodes[root.0].shape),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            if let NodeKind::Op(op) = &self.nodes[i].kind {
                let op = op.clone();
                let inputs = self.nodes[i].inputs.clone();
                let views: Vec<(&[usize], &[f64])> = inputs
                    .iter()
                    .map(|&id| {
                        (self.nodes[id.0].shape.as_slice(), self.nodes[id.0].value.as_slice())
                    })
                    .collect();
                let contribs = backward_op(&op, &views, &self.nodes[i].value, &gout);
                for (&inp, contrib) in inputs.iter().zip(contribs) {
                    if !self.nodes[inp.0].needs_grad {
                        continue;
                    }
                    match self.grads[inp.0].as_mut() {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a += c;
                            }
                        }
                        None => self.grads[inp.0] = Some(contrib),
                    }
                }
            }
            self.grads[i] = Some(gout);
        }

        // Unreached differentiable leaves get explicit zeros.
        for i in 0..self.nodes.len() {
            if let NodeKind::Leaf { requires_grad: true } = self.nodes[i].kind {
                if self.grads[i].is_none() {
                    self.grads[i] = Some(vec![0.0; self.nodes[i].value.len()]);
                }
            }
        }
        Ok(())
    }
}

// ── forward kernels ────────────────────────────────────────────────────

fn expect_arity(op: &Op, inputs: &[(&[usize], &[f64])], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::arg(
            // leak-free static name via match
            match op.name() {
                s => s,
            },
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn forward(op: &Op, inputs: &[(&[usize], &[f64])]) -> Result<(Vec<usize>, Vec<f64>)> {
    match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            expect_arity(op, inputs, 2)?;
            let (sa, a) = inputs[0];
            let (sb, b) = inputs[1];
            if sa != sb {
                return Err(Error::shape(op.name(), format!("{sa:?} vs {sb:?}")));
            }
            let out = a
                .iter()
                .zip(b)
                .map(|(x, y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mul => x * y,
                    _ => x / y,
                })
                .collect();
            Ok((sa.to_vec(), out))
        }
        Op::AddScalar(c) => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            Ok((s.to_vec(), x.iter().map(|v| v + c).collect()))
        }
        Op::MulScalar(c) => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            Ok((s.to_vec(), x.iter().map(|v| v * c).collect()))
        }
        Op::Relu => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            Ok((s.to_vec(), x.iter().map(|v| v.max(0.0)).collect()))
        }
        Op::Log => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            Ok((s.to_vec(), x.iter().map(|v| v.max(LOG_EPS).ln()).collect()))
        }
        Op::MatMul => {
            expect_arity(op, inputs, 2)?;
            let (sa, a) = inputs[0];
            let (sb, b) = inputs[1];
            let (n, k) = dims2("matmul", sa)?;
            let (k2, m) = dims2("matmul", sb)?;
            if k != k2 {
                return Err(Error::shape("matmul", format!("inner dims {sa:?} x {sb:?}")));
            }
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for l in 0..k {
                    let av = a[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        out[i * m + j] += av * b[l * m + j];
                    }
                }
            }
            Ok((vec![n, m], out))
        }
        Op::AddRow => {
            expect_arity(op, inputs, 2)?;
            let (sa, a) = inputs[0];
            let (sb, b) = inputs[1];
            let (n, c) = dims2("add_row", sa)?;
            let cb = dims1("add_row", sb)?;
            if c != cb {
                return Err(Error::shape("add_row", format!("{sa:?} + bias {sb:?}")));
            }
            let mut out = Vec::with_capacity(n * c);
            for i in 0..n {
                for j in 0..c {
                    out.push(a[i * c + j] + b[j]);
                }
            }
            Ok((vec![n, c], out))
        }
        Op::DivCol => {
            expect_arity(op, inputs, 2)?;
            let (sa, a) = inputs[0];
            let (sb, b) = inputs[1];
            let (n, c) = dims2("div_col", sa)?;
            let nb = dims1("div_col", sb)?;
            if n != nb {
                return Err(Error::shape("div_col", format!("{sa:?} / per-row {sb:?}")));
            }
            let mut out = Vec::with_capacity(n * c);
            for i in 0..n {
                for j in 0..c {
                    out.push(a[i * c + j] / b[i]);
                }
            }
            Ok((vec![n, c], out))
        }
        Op::SoftmaxRows => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            let (n, c) = dims2("softmax_rows", s)?;
            let mut out = vec![0.0; n * c];
            for i in 0..n {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    out[i * c + j] /= z;
                }
            }
            Ok((vec![n, c], out))
        }
        Op::L2NormRows => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            let (n, c) = dims2("l2_norm_rows", s)?;
            let out = (0..n)
                .map(|i| x[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Ok((vec![n], out))
        }
        Op::RowSum => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            let (n, c) = dims2("row_sum", s)?;
            let out = (0..n).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
            Ok((vec![n], out))
        }
        Op::RowMax => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            let (n, c) = dims2("row_max", s)?;
            let out = (0..n)
                .map(|i| {
                    let row = &x[i * c..(i + 1) * c];
                    row[argmax_row(row)]
                })
                .collect();
            Ok((vec![n], out))
        }
        Op::Sum => {
            expect_arity(op, inputs, 1)?;
            Ok((vec![1], vec![inputs[0].1.iter().sum()]))
        }
        Op::Mean => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0].1;
            Ok((vec![1], vec![x.iter().sum::<f64>() / x.len() as f64]))
        }
        Op::MeanPoolRows(t) => {
            expect_arity(op, inputs, 1)?;
            let t = *t;
            let (s, x) = inputs[0];
            let (rows, c) = dims2("mean_pool_rows", s)?;
            if t == 0 || rows % t != 0 {
                return Err(Error::shape(
                    "mean_pool_rows",
                    format!("{rows} rows not divisible into groups of {t}"),
                ));
            }
            let n = rows / t;
            let mut out = vec![0.0; n * c];
            for i in 0..n {
                for r in 0..t {
                    for j in 0..c {
                        out[i * c + j] += x[(i * t + r) * c + j];
                    }
                }
                for j in 0..c {
                    out[i * c + j] /= t as f64;
                }
            }
            Ok((vec![n, c], out))
        }
        Op::GatherRows(idx) => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            let (n, c) = dims2("gather_rows", s)?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::arg(
                    "gather_rows",
                    format!("row index {bad} out of range for {n} rows"),
                ));
            }
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(&x[i * c..(i + 1) * c]);
            }
            Ok((vec![idx.len(), c], out))
        }
        Op::ConcatRows => {
            if inputs.is_empty() {
                return Err(Error::arg("concat_rows", "no inputs".to_string()));
            }
            let (_, c0) = dims2("concat_rows", inputs[0].0)?;
            let mut rows = 0;
            let mut out = Vec::new();
            for (s, x) in inputs {
                let (n, c) = dims2("concat_rows", s)?;
                if c != c0 {
                    return Err(Error::shape("concat_rows", format!("columns {c} vs {c0}")));
                }
                rows += n;
                out.extend_from_slice(x);
            }
            Ok((vec![rows, c0], out))
        }
        Op::ConcatCols => {
            if inputs.is_empty() {
                return Err(Error::arg("concat_cols", "no inputs".to_string()));
            }
            let (n0, _) = dims2("concat_cols", inputs[0].0)?;
            let mut widths = Vec::with_capacity(inputs.len());
            for (s, _) in inputs {
                let (n, c) = dims2("concat_cols", s)?;
                if n != n0 {
                    return Err(Error::shape("concat_cols", format!("rows {n} vs {n0}")));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(n0 * total);
            for i in 0..n0 {
                for ((_, x), &c) in inputs.iter().zip(&widths) {
                    out.extend_from_slice(&x[i * c..(i + 1) * c]);
                }
            }
            Ok((vec![n0, total], out))
        }
        Op::Reshape(new_shape) => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            let numel: usize = new_shape.iter().product();
            if new_shape.iter().any(|&d| d == 0) || numel != x.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("{s:?} ({} elements) into {new_shape:?}", x.len()),
                ));
            }
            Ok((new_shape.clone(), x.to_vec()))
        }
        Op::GradReverse(_) => {
            expect_arity(op, inputs, 1)?;
            let (s, x) = inputs[0];
            Ok((s.to_vec(), x.to_vec()))
        }
    }
}

// ── backward kernels ───────────────────────────────────────────────────

/// Per-input gradient contributions for one op. `inputs` and `out` are the
/// recorded forward values; `g` is the upstream adjoint of the output.
fn backward_op(
    op: &Op,
    inputs: &[(&[usize], &[f64])],
    out: &[f64],
    g: &[f64],
) -> Vec<Vec<f64>> {
    match op {
        Op::Add => vec![g.to_vec(), g.to_vec()],
        Op::Sub => vec![g.to_vec(), g.iter().map(|v| -v).collect()],
        Op::Mul => {
            let (a, b) = (inputs[0].1, inputs[1].1);
            vec![
                g.iter().zip(b).map(|(gv, bv)| gv * bv).collect(),
                g.iter().zip(a).map(|(gv, av)| gv * av).collect(),
            ]
        }
        Op::Div => {
            let (a, b) = (inputs[0].1, inputs[1].1);
            vec![
                g.iter().zip(b).map(|(gv, bv)| gv / bv).collect(),
                g.iter()
                    .zip(a)
                    .zip(b)
                    .map(|((gv, av), bv)| -gv * av / (bv * bv))
                    .collect(),
            ]
        }
        Op::AddScalar(_) => vec![g.to_vec()],
        Op::MulScalar(c) => vec![g.iter().map(|v| v * c).collect()],
        Op::Relu => {
            let x = inputs[0].1;
            vec![g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect()]
        }
        Op::Log => {
            let x = inputs[0].1;
            vec![g
                .iter()
                .zip(x)
                .map(|(gv, xv)| if *xv > LOG_EPS { gv / xv } else { 0.0 })
                .collect()]
        }
        Op::MatMul => {
            let (sa, a) = inputs[0];
            let (_, b) = inputs[1];
            let (n, k) = (sa[0], sa[1]);
            let m = inputs[1].0[1];
            // dA = G . B^T
            let mut da = vec![0.0; n * k];
            for i in 0..n {
                for l in 0..k {
                    let mut s = 0.0;
                    for j in 0..m {
                        s += g[i * m + j] * b[l * m + j];
                    }
                    da[i * k + l] = s;
                }
            }
            // dB = A^T . G
            let mut db = vec![0.0; k * m];
            for l in 0..k {
                for i in 0..n {
                    let av = a[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        db[l * m + j] += av * g[i * m + j];
                    }
                }
            }
            vec![da, db]
        }
        Op::AddRow => {
            let (sa, _) = inputs[0];
            let (n, c) = (sa[0], sa[1]);
            let mut db = vec![0.0; c];
            for i in 0..n {
                for j in 0..c {
                    db[j] += g[i * c + j];
                }
            }
            vec![g.to_vec(), db]
        }
        Op::DivCol => {
            let (sa, a) = inputs[0];
            let d = inputs[1].1;
            let (n, c) = (sa[0], sa[1]);
            let mut da = vec![0.0; n * c];
            let mut dd = vec![0.0; n];
            for i in 0..n {
                for j in 0..c {
                    da[i * c + j] = g[i * c + j] / d[i];
                    dd[i] -= g[i * c + j] * a[i * c + j] / (d[i] * d[i]);
                }
            }
            vec![da, dd]
        }
        Op::SoftmaxRows => {
            let (s, _) = inputs[0];
            let (n, c) = (s[0], s[1]);
            let mut dx = vec![0.0; n * c];
            for i in 0..n {
                let y = &out[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                for j in 0..c {
                    dx[i * c + j] = y[j] * (gr[j] - dot);
                }
            }
            vec![dx]
        }
        Op::L2NormRows => {
            let (s, x) = inputs[0];
            let (n, c) = (s[0], s[1]);
            let mut dx = vec![0.0; n * c];
            for i in 0..n {
                if out[i] > 0.0 {
                    for j in 0..c {
                        dx[i * c + j] = g[i] * x[i * c + j] / out[i];
                    }
                }
            }
            vec![dx]
        }
        Op::RowSum => {
            let (s, _) = inputs[0];
            let (n, c) = (s[0], s[1]);
            let mut dx = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..c {
                    dx[i * c + j] = g[i];
                }
            }
            vec![dx]
        }
        Op::RowMax => {
            let (s, x) = inputs[0];
            let (n, c) = (s[0], s[1]);
            let mut dx = vec![0.0; n * c];
            for i in 0..n {
                let j = argmax_row(&x[i * c..(i + 1) * c]);
                dx[i * c + j] = g[i];
            }
            vec![dx]
        }
        Op::Sum => {
            let x = inputs[0].1;
            vec![vec![g[0]; x.len()]]
        }
        Op::Mean => {
            let x = inputs[0].1;
            vec![vec![g[0] / x.len() as f64; x.len()]]
        }
        Op::MeanPoolRows(t) => {
            let t = *t;
            let (s, _) = inputs[0];
            let (rows, c) = (s[0], s[1]);
            let n = rows / t;
            let mut dx = vec![0.0; rows * c];
            for i in 0..n {
                for r in 0..t {
                    for j in 0..c {
                        dx[(i * t + r) * c + j] = g[i * c + j] / t as f64;
                    }
                }
            }
            vec![dx]
        }
        Op::GatherRows(idx) => {
            let (s, _) = inputs[0];
            let (n, c) = (s[0], s[1]);
            let mut dx = vec![0.0; n * c];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    dx[i * c + j] += g[k * c + j];
                }
            }
            vec![dx]
        }
        Op::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|(s, x)| {
                    let part = g[offset..offset + x.len()].to_vec();
                    offset += x.len();
                    let _ = s;
                    part
                })
                .collect()
        }
        Op::ConcatCols => {
            let n = inputs[0].0[0];
            let total: usize = inputs.iter().map(|(s, _)| s[1]).sum();
            let mut outs: Vec<Vec<f64>> =
                inputs.iter().map(|(s, _)| vec![0.0; s[0] * s[1]]).collect();
            for i in 0..n {
                let mut offset = 0;
                for (k, (s, _)) in inputs.iter().enumerate() {
                    let c = s[1];
                    outs[k][i * c..(i + 1) * c]
                        .copy_from_slice(&g[i * total + offset..i * total + offset + c]);
                    offset += c;
                }
            }
            outs
        }
        Op::Reshape(_) => vec![g.to_vec()],
        Op::GradReverse(beta) => vec![g.iter().map(|v| v * -beta).collect()],
    }
}

// ── gradient checking ──────────────────────────────────────────────────

/// Compare the analytic gradient of a scalar-valued graph function against
/// central finite differences.
///
/// Returns the max over coordinates of
/// `|analytic - central| / max(1, |analytic|, |central|)` where
/// `central = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, VarId) -> Result<VarId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::arg("gradcheck", format!("eps must be in (0, 1e-2], got {eps}")));
    }

    let eval = |data: &[f64]| -> Result<f64> {
        let t = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let mut g = Graph::new();
        let id = g.leaf(&t);
        let y = f(&mut g, id)?;
        if g.value(y).len() != 1 {
            return Err(Error::arg("gradcheck", "f must produce a scalar".to_string()));
        }
        let v = g.scalar_value(y);
        if !v.is_finite() {
            return Err(Error::non_finite("gradcheck objective".to_string()));
        }
        Ok(v)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let xid = g.param(x.shape().to_vec(), x.data().to_vec())?;
    let y = f(&mut g, xid)?;
    if g.value(y).len() != 1 {
        return Err(Error::arg("gradcheck", "f must produce a scalar".to_string()));
    }
    if !g.scalar_value(y).is_finite() {
        return Err(Error::non_finite("gradcheck objective".to_string()));
    }
    g.backward(y)?;
    let analytic = g.grad(xid).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut max_err = 0.0f64;
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + eps;
        let fp = eval(&data)?;
        data[i] = orig - eps;
        let fm = eval(&data)?;
        data[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(central.abs());
        max_err = max_err.max((analytic[i] - central).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_param(g: &mut Graph, data: Vec<f64>) -> VarId {
        let n = data.len();
        g.param(vec![n], data).unwrap()
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = leaf_param(&mut g, vec![3.0]);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_subgradient_zero_at_negative() {
        let mut g = Graph::new();
        let x = leaf_param(&mut g, vec![-1.0, 2.0]);
        let r = g.relu(x).unwrap();
        let y = g.sum(r).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn grad_reversal_forward_is_identity_bitwise() {
        let mut g = Graph::new();
        let x = leaf_param(&mut g, vec![1.5, -2.0]);
        let r = g.grad_reverse(x, 0.75).unwrap();
        assert_eq!(g.value(r), g.value(x));
    }

    #[test]
    fn grad_reversal_backward_scales_by_minus_beta_exactly() {
        // Upstream gradient of 2.0 into the reversal node.
        let mut g = Graph::new();
        let x = leaf_param(&mut g, vec![1.0]);
        let r = g.grad_reverse(x, 0.75).unwrap();
        let s = g.sum(r).unwrap();
        let y = g.mul_scalar(s, 2.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0 * -0.75]);
        assert_eq!(g.grad(x).unwrap(), &[-1.5]);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let s = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g
            .constant(vec![3, 4], vec![100.0, -3.0, 7.5, 2.0, 0.1, 0.2, 0.3, 0.4, -900.0, 0.0, 1.0, 2.0])
            .unwrap();
        let s = g.softmax_rows(x).unwrap();
        for i in 0..3 {
            let row_sum: f64 = g.value(s)[i * 4..(i + 1) * 4].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let logits = vec![0.3, -1.2, 2.0, 0.7];
        let mut g = Graph::new();
        let a = g.constant(vec![1, 4], logits.clone()).unwrap();
        let b = g
            .constant(vec![1, 4], logits.iter().map(|v| v + 123.456).collect())
            .unwrap();
        let sa = g.softmax_rows(a).unwrap();
        let sb = g.softmax_rows(b).unwrap();
        for (x, y) in g.value(sa).iter().zip(g.value(sb)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_norm_rows_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let n = g.l2_norm_rows(x).unwrap();
        assert_eq!(g.value(n), &[5.0]);
    }

    #[test]
    fn log_clamps_nonpositive_input() {
        let mut g = Graph::new();
        let x = g.constant(vec![2], vec![0.0, -3.0]).unwrap();
        let l = g.log(x).unwrap();
        assert_eq!(g.value(l), &[LOG_EPS.ln(), LOG_EPS.ln()]);
    }

    #[test]
    fn row_max_ties_pick_lowest_index() {
        let mut g = Graph::new();
        let x = g.param(vec![1, 3], vec![2.0, 2.0, 1.0]).unwrap();
        let m = g.row_max(x).unwrap();
        assert_eq!(g.value(m), &[2.0]);
        let y = g.sum(m).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_pool_rows_groups() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = g.mean_pool_rows(x, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 2]);
        assert_eq!(g.value(p), &[2.0, 3.0]);
    }

    #[test]
    fn gather_scatter_round_trip_gradient() {
        let mut g = Graph::new();
        let x = g.param(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // Row 1 picked twice: its gradient must accumulate.
        let sel = g.gather_rows(x, vec![1, 1]).unwrap();
        let y = g.sum(sel).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_cols_splits_gradient() {
        let mut g = Graph::new();
        let a = g.param(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = g.param(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.constant(vec![2, 3], vec![1.0, 10.0, 100.0, 2.0, 20.0, 200.0]).unwrap();
        let p = g.mul(c, w).unwrap();
        let y = g.sum(p).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[10.0, 100.0, 20.0, 200.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_foreign_id() {
        let mut other = Graph::new();
        let x = other.param(vec![1], vec![1.0]).unwrap();
        let mut g = Graph::new();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(vec![1], vec![2.0]).unwrap();
        let unused = g.param(vec![2], vec![1.0, 1.0]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_error_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![4, 2], vec![0.0; 8]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains('2') && err.contains('3') && err.contains('4'), "{err}");
    }

    #[test]
    fn division_by_zero_reports_non_finite() {
        let mut g = Graph::new();
        let a = g.constant(vec![1], vec![1.0]).unwrap();
        let b = g.constant(vec![1], vec![0.0]).unwrap();
        match g.div(a, b) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_replay_is_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(vec![2, 2], vec![0.3, -0.7, 1.9, 0.01]).unwrap();
            let w = g.param(vec![2, 2], vec![0.5, 0.25, -1.0, 2.0]).unwrap();
            let h = g.matmul(x, w).unwrap();
            let r = g.relu(h).unwrap();
            let s = g.softmax_rows(r).unwrap();
            let l = g.log(s).unwrap();
            let y = g.mean(l).unwrap();
            g.backward(y).unwrap();
            (g.value(y).to_vec(), g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradcheck_sum_of_squares_is_tight() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let err = gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn gradcheck_rejects_bad_eps() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(gradcheck(|g, x| g.sum(x), &x, 0.0).is_err());
        assert!(gradcheck(|g, x| g.sum(x), &x, 0.1).is_err());
    }

    #[test]
    fn gradcheck_composite_ops() {
        // softmax -> log -> mask -> mean exercised together.
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.4, 0.0, -0.5]).unwrap();
        let err = gradcheck(
            |g, x| {
                let s = g.softmax_rows(x)?;
                let l = g.log(s)?;
                let n = g.l2_norm_rows(l)?;
                g.mean(n)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn attach_grad_writes_into_tensor() {
        let mut t = Tensor::vector(vec![3.0]).unwrap().with_grad();
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.attach_grad(x, &mut t).unwrap();
        assert_eq!(t.grad().unwrap(), &[6.0]);
    }
}
