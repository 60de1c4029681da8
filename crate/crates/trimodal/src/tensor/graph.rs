//! Reverse-mode autodiff tape.
//!
//! Ops append nodes to a [`Graph`] in construction order, which is already a
//! topological order. [`Graph::backward`] seeds the loss gradient and walks the
//! tape once in reverse, accumulating into every reachable node that requires
//! gradients. A second backward on the same graph is rejected.

use super::{default_precision, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleBy { x: usize, s: usize },
    MatMul(usize, usize),
    Transpose(usize),
    Gelu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    ClampMin { x: usize, min: f64 },
    SoftmaxRows { x: usize, temperature: f64 },
    LogSoftmaxRows(usize),
    LayerNormRows { x: usize, gain: usize, bias: usize, eps: f64 },
    L2NormalizeRows(usize),
    SumAll(usize),
    LogSumExpAll(usize),
    OuterAdd(usize, usize),
    SliceRows { x: usize, start: usize, end: usize },
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize, end: usize },
    ConcatCols(Vec<usize>),
    EmbedLookup { table: usize, ids: Vec<usize> },
    SelectEntries { x: usize, entries: Vec<(usize, usize)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Autodiff tape. Single-threaded; distinct graphs are independent.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    grad_enabled: bool,
    backward_done: bool,
}

impl Graph {
    /// Training-mode graph at the process default precision.
    pub fn new() -> Self {
        Self::with_precision(default_precision())
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// Inference-mode graph: every leaf is constant, backward is unavailable.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        value.round_to(self.precision);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        let mut value = value;
        value.round_to(self.precision);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name.to_string() });
        }
        let requires_grad =
            self.grad_enabled && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same("add", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y)?;
        self.push("add", out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same("sub", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = zip_same("mul", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Add a trailing-axis vector to every row. The only broadcasting rule.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[bias.0].value;
        if bv.numel() != av.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % cols])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add_bias", out, Op::AddBias(a.0, bias.0), &[a.0, bias.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map_unary(&self.nodes[a.0].value, |x| x * c);
        self.push("scale", out, Op::Scale(a.0, c), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map_unary(&self.nodes[a.0].value, |x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a.0), &[a.0])
    }

    /// Multiply `x` elementwise by a single-element tensor node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if sv.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.nodes[x.0].value.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let c = sv.data()[0];
        let out = map_unary(&self.nodes[x.0].value, |v| v * c);
        self.push("scale_by", out, Op::ScaleBy { x: x.0, s: s.0 }, &[x.0, s.0])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    // ── Matrix ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: av.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push("transpose", out, Op::Transpose(a.0), &[a.0])
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = map_unary(&self.nodes[a.0].value, gelu_scalar);
        self.push("gelu", out, Op::Gelu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map_unary(&self.nodes[a.0].value, sigmoid_scalar);
        self.push("sigmoid", out, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = map_unary(&self.nodes[a.0].value, f64::exp);
        self.push("exp", out, Op::Exp(a.0), &[a.0])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = map_unary(&self.nodes[a.0].value, f64::ln);
        self.push("ln", out, Op::Ln(a.0), &[a.0])
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = map_unary(&self.nodes[a.0].value, softplus_scalar);
        self.push("softplus", out, Op::Softplus(a.0), &[a.0])
    }

    /// Elementwise `max(x, min)`. The subgradient passes through only where
    /// the input is strictly above `min`.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var> {
        let out = map_unary(&self.nodes[a.0].value, |x| x.max(min));
        self.push("clamp_min", out, Op::ClampMin { x: a.0, min }, &[a.0])
    }

    // ── Row-structured ops ──────────────────────────────────────────────

    /// Temperature-scaled softmax over the trailing axis, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &av.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = ((x - max) / temperature).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("softmax", out, Op::SoftmaxRows { x: a.0, temperature }, &[a.0])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &av.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            for (d, &x) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *d = x - lse;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmaxRows(a.0), &[a.0])
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "layer_norm eps must be nonnegative, got {eps}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        if gv.numel() != cols || bv.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                let xhat = (row[j] - mean) * inv;
                data[r * cols + j] = xhat * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNormRows { x: x.0, gain: gain.0, bias: bias.0, eps },
            &[x.0, gain.0, bias.0],
        )
    }

    /// Normalize each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &av.data()[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-300 {
                return Err(Error::DegenerateInput(
                    "cannot L2-normalize a zero vector".to_string(),
                ));
            }
            for j in 0..cols {
                data[r * cols + j] = row[j] / norm;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("l2_normalize", out, Op::L2NormalizeRows(a.0), &[a.0])
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a.0), &[a.0])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn log_sum_exp_all(&mut self, a: Var) -> Result<Var> {
        let d = self.nodes[a.0].value.data();
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let val = d.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        self.push("log_sum_exp", Tensor::scalar(val), Op::LogSumExpAll(a.0), &[a.0])
    }

    /// `out[i, j] = a[i] + b[j]` over flattened inputs.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.nodes[a.0].value.numel(), self.nodes[b.0].value.numel());
        let mut data = vec![0.0; la * lb];
        for i in 0..la {
            let ai = self.nodes[a.0].value.data()[i];
            for j in 0..lb {
                data[i * lb + j] = ai + self.nodes[b.0].value.data()[j];
            }
        }
        let out = Tensor::new(vec![la, lb], data)?;
        self.push("outer_add", out, Op::OuterAdd(a.0, b.0), &[a.0, b.0])
    }

    // ── Structural ops ──────────────────────────────────────────────────

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        if start >= end || end > rows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let data = av.data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(vec![end - start, cols], data)?;
        self.push("slice_rows", out, Op::SliceRows { x: a.0, start, end }, &[a.0])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("concat_rows of nothing".into()));
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", out, Op::ConcatRows(idxs.clone()), &idxs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        if start >= end || end > cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = vec![0.0; rows * w];
        for r in 0..rows {
            data[r * w..(r + 1) * w].copy_from_slice(&av.data()[r * cols + start..r * cols + end]);
        }
        let out = Tensor::new(vec![rows, w], data)?;
        self.push("slice_cols", out, Op::SliceCols { x: a.0, start, end }, &[a.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("concat_cols of nothing".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut at = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = &self.nodes[p.0].value;
            if pv.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: pv.shape().to_vec(),
                });
            }
            for r in 0..rows {
                data[r * total + at..r * total + at + w]
                    .copy_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
            at += w;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", out, Op::ConcatCols(idxs.clone()), &idxs)
    }

    /// Gather rows of `table` by token id.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary(format!(
                    "token id {id} out of range for table of {vocab}"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            "embed_lookup",
            out,
            Op::EmbedLookup { table: table.0, ids: ids.to_vec() },
            &[table.0],
        )
    }

    /// Gather scalar entries `x[r, c]` into a flat vector.
    pub fn select_entries(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= rows || c >= cols {
                return Err(Error::ShapeMismatch {
                    op: "select_entries",
                    lhs: av.shape().to_vec(),
                    rhs: vec![r, c],
                });
            }
            data.push(av.at(r, c));
        }
        let out = Tensor::new(vec![entries.len()], data)?;
        self.push(
            "select_entries",
            out,
            Op::SelectEntries { x: a.0, entries: entries.to_vec() },
            &[a.0],
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates `grad` on every reachable
    /// node with `requires_grad`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward has already run on this graph; build a fresh graph per step".into(),
            ));
        }
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.clone().expect("checked above");
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            propagate(before, node, &op, &grad)?;
        }
        Ok(())
    }
}

fn propagate(before: &mut [Node], node: &Node, op: &Op, grad: &[f64]) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_grad(before, *a, grad);
            add_grad(before, *b, grad);
        }
        Op::Sub(a, b) => {
            add_grad(before, *a, grad);
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            add_grad(before, *b, &neg);
        }
        Op::Mul(a, b) => {
            if before[*a].requires_grad {
                let c: Vec<f64> = grad
                    .iter()
                    .zip(before[*b].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                add_grad(before, *a, &c);
            }
            if before[*b].requires_grad {
                let c: Vec<f64> = grad
                    .iter()
                    .zip(before[*a].value.data())
                    .map(|(g, x)| g * x)
                    .collect();
                add_grad(before, *b, &c);
            }
        }
        Op::AddBias(a, b) => {
            add_grad(before, *a, grad);
            if before[*b].requires_grad {
                let cols = before[*b].value.numel();
                let mut c = vec![0.0; cols];
                for (i, g) in grad.iter().enumerate() {
                    c[i % cols] += g;
                }
                add_grad(before, *b, &c);
            }
        }
        Op::Scale(a, k) => {
            let c: Vec<f64> = grad.iter().map(|g| g * k).collect();
            add_grad(before, *a, &c);
        }
        Op::AddScalar(a) => {
            add_grad(before, *a, grad);
        }
        Op::ScaleBy { x, s } => {
            let sval = before[*s].value.data()[0];
            if before[*x].requires_grad {
                let c: Vec<f64> = grad.iter().map(|g| g * sval).collect();
                add_grad(before, *x, &c);
            }
            if before[*s].requires_grad {
                let dot: f64 = grad
                    .iter()
                    .zip(before[*x].value.data())
                    .map(|(g, x)| g * x)
                    .sum();
                add_grad(before, *s, &[dot]);
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (before[*a].value.rows(), before[*a].value.cols());
            let n = before[*b].value.cols();
            if before[*a].requires_grad {
                // dA[i,p] = sum_j G[i,j] * B[p,j]
                let bv = before[*b].value.data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grad[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                add_grad(before, *a, &da);
            }
            if before[*b].requires_grad {
                // dB[p,j] = sum_i A[i,p] * G[i,j]
                let av = before[*a].value.data();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * grad[i * n + j];
                        }
                    }
                }
                add_grad(before, *b, &db);
            }
        }
        Op::Transpose(a) => {
            let (n, m) = (node.value.rows(), node.value.cols());
            let mut c = vec![0.0; m * n];
            for i in 0..n {
                for j in 0..m {
                    c[j * n + i] = grad[i * m + j];
                }
            }
            add_grad(before, *a, &c);
        }
        Op::Gelu(a) => {
            let c: Vec<f64> = grad
                .iter()
                .zip(before[*a].value.data())
                .map(|(g, &x)| g * gelu_grad_scalar(x))
                .collect();
            add_grad(before, *a, &c);
        }
        Op::Sigmoid(a) => {
            let c: Vec<f64> = grad
                .iter()
                .zip(node.value.data())
                .map(|(g, &y)| g * y * (1.0 - y))
                .collect();
            add_grad(before, *a, &c);
        }
        Op::Exp(a) => {
            let c: Vec<f64> = grad
                .iter()
                .zip(node.value.data())
                .map(|(g, &y)| g * y)
                .collect();
            add_grad(before, *a, &c);
        }
        Op::Ln(a) => {
            let c: Vec<f64> = grad
                .iter()
                .zip(before[*a].value.data())
                .map(|(g, &x)| g / x)
                .collect();
            add_grad(before, *a, &c);
        }
        Op::Softplus(a) => {
            let c: Vec<f64> = grad
                .iter()
                .zip(before[*a].value.data())
                .map(|(g, &x)| g * sigmoid_scalar(x))
                .collect();
            add_grad(before, *a, &c);
        }
        Op::ClampMin { x, min } => {
            let c: Vec<f64> = grad
                .iter()
                .zip(before[*x].value.data())
                .map(|(g, &v)| if v > *min { *g } else { 0.0 })
                .collect();
            add_grad(before, *x, &c);
        }
        Op::SoftmaxRows { x, temperature } => {
            let (rows, cols) = (node.value.rows(), node.value.cols());
            let mut c = vec![0.0; rows * cols];
            for r in 0..rows {
                let y = &node.value.data()[r * cols..(r + 1) * cols];
                let g = &grad[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                for j in 0..cols {
                    c[r * cols + j] = y[j] * (g[j] - dot) / temperature;
                }
            }
            add_grad(before, *x, &c);
        }
        Op::LogSoftmaxRows(a) => {
            let (rows, cols) = (node.value.rows(), node.value.cols());
            let mut c = vec![0.0; rows * cols];
            for r in 0..rows {
                let y = &node.value.data()[r * cols..(r + 1) * cols];
                let g = &grad[r * cols..(r + 1) * cols];
                let gsum: f64 = g.iter().sum();
                for j in 0..cols {
                    c[r * cols + j] = g[j] - y[j].exp() * gsum;
                }
            }
            add_grad(before, *a, &c);
        }
        Op::LayerNormRows { x, gain, bias, eps } => {
            let eps = *eps;
            let xv = &before[*x].value;
            let gv = &before[*gain].value;
            let (rows, cols) = (xv.rows(), xv.cols());
            let mut dx = vec![0.0; rows * cols];
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            for r in 0..rows {
                let row = &xv.data()[r * cols..(r + 1) * cols];
                let g = &grad[r * cols..(r + 1) * cols];
                let (mean, var) = mean_var(row);
                let inv = 1.0 / (var + eps).sqrt();
                // h = g * gain; dx = (h - mean(h) - xhat * mean(h .* xhat)) * inv
                let mut h_mean = 0.0;
                let mut hx_mean = 0.0;
                let mut xhat = vec![0.0; cols];
                let mut h = vec![0.0; cols];
                for j in 0..cols {
                    xhat[j] = (row[j] - mean) * inv;
                    h[j] = g[j] * gv.data()[j];
                    h_mean += h[j];
                    hx_mean += h[j] * xhat[j];
                }
                h_mean /= cols as f64;
                hx_mean /= cols as f64;
                for j in 0..cols {
                    dx[r * cols + j] = (h[j] - h_mean - xhat[j] * hx_mean) * inv;
                    dgain[j] += g[j] * xhat[j];
                    dbias[j] += g[j];
                }
            }
            add_grad(before, *x, &dx);
            add_grad(before, *gain, &dgain);
            add_grad(before, *bias, &dbias);
        }
        Op::L2NormalizeRows(a) => {
            let xv = &before[*a].value;
            let (rows, cols) = (xv.rows(), xv.cols());
            let mut c = vec![0.0; rows * cols];
            for r in 0..rows {
                let x = &xv.data()[r * cols..(r + 1) * cols];
                let y = &node.value.data()[r * cols..(r + 1) * cols];
                let g = &grad[r * cols..(r + 1) * cols];
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                for j in 0..cols {
                    c[r * cols + j] = (g[j] - y[j] * dot) / norm;
                }
            }
            add_grad(before, *a, &c);
        }
        Op::SumAll(a) => {
            let n = before[*a].value.numel();
            let c = vec![grad[0]; n];
            add_grad(before, *a, &c);
        }
        Op::LogSumExpAll(a) => {
            let d = before[*a].value.data();
            let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = d.iter().map(|&x| (x - max).exp()).sum();
            let c: Vec<f64> = d.iter().map(|&x| grad[0] * (x - max).exp() / sum).collect();
            add_grad(before, *a, &c);
        }
        Op::OuterAdd(a, b) => {
            let la = before[*a].value.numel();
            let lb = before[*b].value.numel();
            if before[*a].requires_grad {
                let mut c = vec![0.0; la];
                for i in 0..la {
                    c[i] = grad[i * lb..(i + 1) * lb].iter().sum();
                }
                add_grad(before, *a, &c);
            }
            if before[*b].requires_grad {
                let mut c = vec![0.0; lb];
                for i in 0..la {
                    for j in 0..lb {
                        c[j] += grad[i * lb + j];
                    }
                }
                add_grad(before, *b, &c);
            }
        }
        Op::SliceRows { x, start, end } => {
            let cols = before[*x].value.cols();
            let mut c = vec![0.0; before[*x].value.numel()];
            c[start * cols..end * cols].copy_from_slice(grad);
            add_grad(before, *x, &c);
        }
        Op::ConcatRows(parts) => {
            let mut at = 0;
            for &p in parts {
                let n = before[p].value.numel();
                if before[p].requires_grad {
                    add_grad(before, p, &grad[at..at + n]);
                }
                at += n;
            }
        }
        Op::SliceCols { x, start, end } => {
            let (rows, cols) = (before[*x].value.rows(), before[*x].value.cols());
            let w = end - start;
            let mut c = vec![0.0; rows * cols];
            for r in 0..rows {
                c[r * cols + start..r * cols + end].copy_from_slice(&grad[r * w..(r + 1) * w]);
            }
            add_grad(before, *x, &c);
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut at = 0;
            for &p in parts {
                let w = before[p].value.cols();
                if before[p].requires_grad {
                    let mut c = vec![0.0; rows * w];
                    for r in 0..rows {
                        c[r * w..(r + 1) * w]
                            .copy_from_slice(&grad[r * total + at..r * total + at + w]);
                    }
                    add_grad(before, p, &c);
                }
                at += w;
            }
        }
        Op::EmbedLookup { table, ids } => {
            if before[*table].requires_grad {
                let d = before[*table].value.cols();
                let mut c = vec![0.0; before[*table].value.numel()];
                for (l, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        c[id * d + j] += grad[l * d + j];
                    }
                }
                add_grad(before, *table, &c);
            }
        }
        Op::SelectEntries { x, entries } => {
            let cols = before[*x].value.cols();
            let mut c = vec![0.0; before[*x].value.numel()];
            for (k, &(r, col)) in entries.iter().enumerate() {
                c[r * cols + col] += grad[k];
            }
            add_grad(before, *x, &c);
        }
    }
    Ok(())
}

fn add_grad(nodes: &mut [Node], idx: usize, contrib: &[f64]) {
    let node = &mut nodes[idx];
    if !node.requires_grad {
        return;
    }
    let numel = node.value.numel();
    let g = node.grad.get_or_insert_with(|| vec![0.0; numel]);
    for (gi, ci) in g.iter_mut().zip(contrib) {
        *gi += ci;
    }
}

fn zip_same(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn gelu_scalar(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
