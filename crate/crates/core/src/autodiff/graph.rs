//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and enough of its
//! inputs to compute the exact vector-Jacobian product later. Nodes are only
//! ever appended, so creation order is a valid topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use super::params::{ParamId, ParameterStore};
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    SegmentSoftmax(Var, Vec<usize>),
    Sigmoid(Var),
    Gelu(Var),
    LeakyRelu(Var, f64),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    BceLogits(Var, Tensor),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients for every parameter leaf that appeared in a recording.
///
/// Parameters that were recorded but not reachable from the loss carry an
/// all-zero gradient.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(p, t)| (*p, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A single recording of differentiable computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    backward_done: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `data` laid out as `rows x cols`.
pub(crate) fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

/// Numerically stable `-[y log σ(x) + (1-y) log(1-σ(x))]`.
pub(crate) fn bce_logit_term(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn classify(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Bcast, TensorError> {
    if lhs.shape() == rhs.shape() {
        Ok(Bcast::Same)
    } else if rhs.len() == 1 {
        Ok(Bcast::Scalar)
    } else if rhs.rows() == 1 && rhs.len() == lhs.cols() {
        Ok(Bcast::Row)
    } else if rhs.cols() == 1 && rhs.rows() == lhs.rows() {
        Ok(Bcast::Col)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })
    }
}

/// Index into the broadcast right-hand operand for flat lhs position `i`.
#[inline]
fn rhs_index(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

fn finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var, TensorError> {
        finite(name, &value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input. Non-finite inputs are rejected.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.push(Op::Leaf, value, "constant")
    }

    /// Records a parameter. Repeated calls for the same id return the same
    /// node, so gradients from every use accumulate in one place. Parameters
    /// of a frozen store are recorded as constants.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<Var, TensorError> {
        if let Some(&v) = self.param_leaves.get(&id) {
            return Ok(v);
        }
        let value = store.value(id).clone();
        let op = if store.is_frozen() {
            Op::Leaf
        } else {
            Op::Param
        };
        let v = self.push(op, value, "param")?;
        self.param_leaves.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                reason: format!("expected 2-d input, got {:?}", av.shape()),
            });
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let d = av.data();
        let out = Tensor::from_fn(&[n, m], |i| d[(i % m) * n + i / m]);
        self.push(Op::Transpose(a), out, "transpose")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = classify(name, av, bv)?;
        let cols = av.cols();
        let bd = bv.data();
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[rhs_index(kind, i, cols)]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(make(a, b, kind), value, name)
    }

    /// Elementwise sum. `b` may be the same shape as `a`, a single value, a
    /// row broadcast over `a`'s rows, or a column broadcast over its columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let value = Tensor::from_fn(self.value(a).shape(), |i| c * self.value(a).data()[i]);
        self.push(Op::Scale(a, c), value, "scale")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(a), value, "reshape")
    }

    /// Selects rows of `a` (an embedding lookup when `a` is a table).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(av.row_slice(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        self.push(Op::Gather(a, idx.to_vec()), value, "gather_rows")
    }

    /// `out[idx[e]] += a[e]` over rows, producing `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.rows() != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let cols = av.cols();
        let mut out = vec![0.0; n * cols];
        for (e, &dst) in idx.iter().enumerate() {
            if dst >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: dst,
                    len: n,
                });
            }
            for (o, v) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(av.row_slice(e)) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![n, cols], out)?;
        self.push(Op::ScatterAdd(a, idx.to_vec()), value, "scatter_add_rows")
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = vec![0.0; av.len()];
        let mut inv_std = Vec::with_capacity(av.rows());
        for (src, dst) in av.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(Op::LayerNorm(a, inv_std), value, "layer_norm")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), softmax_rows(av.data(), av.cols()))?;
        self.push(Op::Softmax(a), value, "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), log_softmax_rows(av.data(), av.cols()))?;
        self.push(Op::LogSoftmax(a), value, "log_softmax")
    }

    /// Softmax over groups of entries: entry `i` of `a` belongs to group
    /// `segments[i]`, and entries of one group sum to one.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize]) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.len() != segments.len() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_softmax",
                lhs: av.shape().to_vec(),
                rhs: vec![segments.len()],
            });
        }
        let groups = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; groups];
        for (&s, &x) in segments.iter().zip(av.data()) {
            max[s] = max[s].max(x);
        }
        let mut total = vec![0.0; groups];
        let mut out: Vec<f64> = segments
            .iter()
            .zip(av.data())
            .map(|(&s, &x)| {
                let e = (x - max[s]).exp();
                total[s] += e;
                e
            })
            .collect();
        for (o, &s) in out.iter_mut().zip(segments) {
            *o /= total[s];
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        self.push(
            Op::SegmentSoftmax(a, segments.to_vec()),
            value,
            "segment_softmax",
        )
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())?;
        self.push(op, value, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, "sigmoid", sigmoid_scalar, Op::Sigmoid(a))
    }

    /// Gaussian-error linear unit (tanh form).
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, "gelu", gelu_scalar, Op::Gelu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        self.unary(
            a,
            "leaky_relu",
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    /// Concatenates along the last dimension; all inputs need equal rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(*p).shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push(Op::Concat(parts.to_vec()), value, "concat")
    }

    /// Stacks inputs along the first axis; all inputs need equal columns.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            out.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push(Op::ConcatRows(parts.to_vec()), value, "concat_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                reason: "empty input".into(),
            });
        }
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    /// Mean binary cross-entropy of logits `a` against fixed targets.
    pub fn bce_with_logits(&mut self, a: Var, targets: &Tensor) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: av.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        finite("bce_with_logits", targets)?;
        let total: f64 = av
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| bce_logit_term(x, y))
            .sum();
        let n = av.len() as f64;
        self.push(
            Op::BceLogits(a, targets.clone()),
            Tensor::scalar(total / n),
            "bce_with_logits",
        )
    }

    /// Runs the reverse sweep from the scalar `loss`.
    ///
    /// Returns one gradient per recorded parameter leaf. May be called once
    /// per recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            if let Op::Param = node.op {
                grads[i] = Some(g);
            }
        }

        let mut leaves: Vec<(ParamId, Var)> = self
            .param_leaves
            .iter()
            .filter(|(_, v)| matches!(self.nodes[v.0].op, Op::Param))
            .map(|(p, v)| (*p, *v))
            .collect();
        leaves.sort_by_key(|(p, _)| p.index);
        let mut entries = Vec::with_capacity(leaves.len());
        for (id, v) in leaves {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            finite("backward", &g)?;
            entries.push((id, g));
        }
        Ok(Gradients { entries })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, f: &dyn Fn(&mut [f64])| {
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.value(v).shape()));
            }
            f(slot.as_mut().unwrap().data_mut());
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(grads, *a, &|da| matmul_nt_acc(gd, bv.data(), da, m, k, n));
                acc(grads, *b, &|db| matmul_tn_acc(av.data(), gd, db, m, k, n));
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                // node is n x m, input is m x n
                acc(grads, *a, &|da| {
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] += gd[i * m + j];
                        }
                    }
                });
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let cols = node.value.cols();
                acc(grads, *a, &|da| da.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                acc(grads, *b, &|db| {
                    for (i, gv) in gd.iter().enumerate() {
                        db[rhs_index(*kind, i, cols)] += sign * gv;
                    }
                });
            }
            Op::Mul(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = node.value.cols();
                acc(grads, *a, &|da| {
                    for (i, gv) in gd.iter().enumerate() {
                        da[i] += gv * bv.data()[rhs_index(*kind, i, cols)];
                    }
                });
                acc(grads, *b, &|db| {
                    for (i, gv) in gd.iter().enumerate() {
                        db[rhs_index(*kind, i, cols)] += gv * av.data()[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(grads, *a, &|da| da.iter_mut().zip(gd).for_each(|(d, g)| *d += c * g));
            }
            Op::Reshape(a) => {
                acc(grads, *a, &|da| da.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            }
            Op::Gather(a, idx) => {
                let cols = node.value.cols();
                acc(grads, *a, &|da| {
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            da[src * cols + c] += gd[r * cols + c];
                        }
                    }
                });
            }
            Op::ScatterAdd(a, idx) => {
                let cols = node.value.cols();
                acc(grads, *a, &|da| {
                    for (e, &dst) in idx.iter().enumerate() {
                        for c in 0..cols {
                            da[e * cols + c] += gd[dst * cols + c];
                        }
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let cols = node.value.cols();
                let y = node.value.data();
                acc(grads, *a, &|da| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (gr, yr) = (&gd[span.clone()], &y[span.clone()]);
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / cols as f64;
                        for (c, d) in da[span].iter_mut().enumerate() {
                            *d += is * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                let y = node.value.data();
                acc(grads, *a, &|da| {
                    for r in 0..node.value.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = gd[span.clone()].iter().zip(&y[span.clone()]).map(|(g, y)| g * y).sum();
                        for c in span {
                            da[c] += y[c] * (gd[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.cols();
                let y = node.value.data();
                acc(grads, *a, &|da| {
                    for r in 0..node.value.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let total: f64 = gd[span.clone()].iter().sum();
                        for c in span {
                            da[c] += gd[c] - y[c].exp() * total;
                        }
                    }
                });
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = node.value.data();
                let groups = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; groups];
                for (i, &s) in segments.iter().enumerate() {
                    dot[s] += gd[i] * y[i];
                }
                acc(grads, *a, &|da| {
                    for (i, &s) in segments.iter().enumerate() {
                        da[i] += y[i] * (gd[i] - dot[s]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(grads, *a, &|da| {
                    for i in 0..da.len() {
                        da[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|da| {
                    for i in 0..da.len() {
                        da[i] += gd[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|da| {
                    for i in 0..da.len() {
                        da[i] += if x[i] > 0.0 { gd[i] } else { slope * gd[i] };
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    acc(grads, *p, &|dp| {
                        for r in 0..node.value.rows() {
                            for c in 0..cols {
                                dp[r * cols + c] += gd[r * total + offset + c];
                            }
                        }
                    });
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(grads, *p, &|dp| {
                        dp.iter_mut().zip(&gd[offset..offset + len]).for_each(|(d, g)| *d += g);
                    });
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let gv = gd[0];
                acc(grads, *a, &|da| da.iter_mut().for_each(|d| *d += gv));
            }
            Op::Mean(a) => {
                let gv = gd[0] / self.value(*a).len() as f64;
                acc(grads, *a, &|da| da.iter_mut().for_each(|d| *d += gv));
            }
            Op::BceLogits(a, y) => {
                let x = self.value(*a).data();
                let n = x.len() as f64;
                let gv = gd[0];
                acc(grads, *a, &|da| {
                    for i in 0..da.len() {
                        da[i] += gv * (sigmoid_scalar(x[i]) - y.data()[i]) / n;
                    }
                });
            }
        }
    }
}
