//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its nodes. Nodes are
//! addressed by [`Var`] handles. Parameters enter through [`Tape::param`]
//! and are the only nodes whose gradients [`Tape::backward`] reports.

use std::collections::BTreeMap;

use super::tensor::{gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Floor applied inside `log` and row-normalization denominators.
pub const EPS: f64 = 1e-12;

/// Variance offset used by batch standardization.
pub const NORM_EPS: f64 = EPS;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier for a trainable tensor, stable across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Statistics used by [`OpKind::BatchStatsNormalize`].
#[derive(Clone, Debug, PartialEq)]
pub enum NormMode {
    /// Standardize with the batch's own mean and (biased) variance.
    Batch,
    /// Standardize with fixed running statistics.
    Running { mean: Vec<f64>, var: Vec<f64> },
}

/// Mean and biased variance of a batch, returned by batch standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Every operation the tape can record.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    Transpose,
    L2NormalizeRows,
    LogSoftmaxRows,
    BatchStatsNormalize(NormMode),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, bool),
    Sub(Var, Var, bool),
    Mul(Var, Var, bool),
    ScalarMul(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Transpose(Var),
    L2NormalizeRows(Var, Vec<f64>),
    LogSoftmaxRows(Var),
    Standardize(Var, Vec<f64>, bool),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

/// Accumulated gradients keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientStore {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientStore {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Sets the gradient of `id`, replacing any previous value.
    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &GradientStore) -> Result<()> {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(existing) => {
                    if existing.shape() != g.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "accumulate",
                            lhs: existing.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
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

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            param: None,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        check_finite("constant", &t)?;
        Ok(self.push(t, false, Op::Leaf))
    }

    /// A trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Result<Var> {
        check_finite("param", &t)?;
        let v = self.push(t, true, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn forward_op(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::ScalarMul(s) => arity(1).and_then(|_| self.scalar_mul(inputs[0], *s)),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::SliceRows { start, end } => {
                arity(1).and_then(|_| self.slice_rows(inputs[0], *start, *end))
            }
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::L2NormalizeRows => arity(1).and_then(|_| self.l2_normalize_rows(inputs[0])),
            OpKind::LogSoftmaxRows => arity(1).and_then(|_| self.log_softmax_rows(inputs[0])),
            OpKind::BatchStatsNormalize(mode) => {
                arity(1).and_then(|_| self.batch_stats_normalize(inputs[0], mode).map(|r| r.0))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = ta.matmul(tb)?;
        check_finite("matmul", &out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// Shape rule for elementwise binary ops. Returns whether `b` is a
    /// single row broadcast over the rows of `a`.
    fn broadcast_rule(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(false);
        }
        let row_like = tb.rows() == 1 && (tb.shape().len() == 1 || tb.shape().len() == 2);
        if ta.is_matrix() && row_like && tb.cols() == ta.cols() {
            return Ok(true);
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let bc = self.broadcast_rule(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, if bc { tb.data()[i % c] } else { tb.data()[i] }))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite(op, &out)?;
        Ok((out, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b, bc)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Sub(a, b, bc)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, bc) = self.binary("elementwise_mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b, bc)))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "scalar_mul" });
        }
        let out = self.value(a).map(|x| x * s);
        check_finite("scalar_mul", &out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::ScalarMul(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Relu(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        check_finite("exp", &out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Exp(a)))
    }

    /// Natural log with its argument clamped below by [`EPS`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(EPS).ln());
        check_finite("log", &out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Log(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(m), rg, Op::Mean(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_rows: no inputs".into()));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() || start >= end || end > t.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let c = t.cols();
        let out = Tensor::matrix(end - start, c, t.data()[start * c..end * c].to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::SliceRows(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = t.transpose();
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Transpose(a)))
    }

    /// Scales every row to unit Euclidean norm; norms are floored at [`EPS`].
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.numel());
        for i in 0..t.rows() {
            let row = t.row(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPS);
            norms.push(n);
            data.extend(row.iter().map(|x| x / n));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        debug_assert_eq!(out.cols(), c);
        check_finite("l2_normalize_rows", &out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::L2NormalizeRows(a, norms)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.numel());
        for i in 0..t.rows() {
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().max(EPS).ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        check_finite("log_softmax_rows", &out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::LogSoftmaxRows(a)))
    }

    /// Per-feature standardization of a `B×F` matrix.
    ///
    /// In [`NormMode::Batch`] the batch's own statistics are used and
    /// returned so the caller can update running estimates.
    pub fn batch_stats_normalize(
        &mut self,
        a: Var,
        mode: &NormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "batch_stats_normalize",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (b, f) = (t.rows(), t.cols());
        let (mean, var, stats) = match mode {
            NormMode::Batch => {
                if b < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_stats_normalize: batch statistics need at least 2 rows".into(),
                    ));
                }
                let mut mean = vec![0.0; f];
                for i in 0..b {
                    for (m, x) in mean.iter_mut().zip(t.row(i)) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; f];
                for i in 0..b {
                    for ((v, x), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= b as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: b,
                };
                (mean, var, Some(stats))
            }
            NormMode::Running { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(Error::ShapeMismatch {
                        op: "batch_stats_normalize",
                        lhs: t.shape().to_vec(),
                        rhs: vec![mean.len(), var.len()],
                    });
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut data = Vec::with_capacity(b * f);
        for i in 0..b {
            data.extend(
                t.row(i)
                    .iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((x, m), s)| (x - m) * s),
            );
        }
        let out = Tensor::matrix(b, f, data)?;
        check_finite("batch_stats_normalize", &out)?;
        let rg = self.any_grad(&[a]);
        let train = matches!(mode, NormMode::Batch);
        Ok((
            self.push(out, rg, Op::Standardize(a, inv_std, train)),
            stats,
        ))
    }

    /// Reverse pass from a scalar root.
    ///
    /// Returns gradients for every parameter that the root depends on.
    /// The tape is consumed; a second call errors until [`Tape::reset`].
    pub fn backward(&mut self, root: Var) -> Result<GradientStore> {
        if self.consumed {
            return Err(Error::Backward(
                "tape already consumed; record a new graph first".into(),
            ));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Backward("root is not on this tape".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let mut store = GradientStore::default();

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                store.accumulate(&GradientStore {
                    grads: BTreeMap::from([(pid, t)]),
                })?;
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(store)
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    send(*a, gemm_nt(g, tb.data(), m, n, k));
                }
                if wants(*b) {
                    send(*b, gemm_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    let gb: Vec<f64> = g.iter().map(|x| sign * x).collect();
                    send(*b, if *bc { row_sum(&gb, out.cols()) } else { gb });
                }
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = out.cols();
                if wants(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * if *bc { tb.data()[i % c] } else { tb.data()[i] })
                        .collect();
                    send(*a, ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    send(*b, if *bc { row_sum(&gb, c) } else { gb });
                }
            }
            Op::ScalarMul(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(a) => send(*a, g.iter().zip(out.data()).map(|(x, y)| x * y).collect()),
            Op::Log(a) => {
                let x = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > EPS { gi / xi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if wants(*p) {
                        send(*p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut ga = vec![0.0; ta.numel()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                send(*a, ga);
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                send(*a, ga);
            }
            Op::L2NormalizeRows(a, norms) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (i, &n) in norms.iter().enumerate() {
                    let y = out.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    if n > EPS {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        ga.extend(y.iter().zip(gr).map(|(yi, gi)| (gi - yi * dot) / n));
                    } else {
                        ga.extend(gr.iter().map(|gi| gi / n));
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let total: f64 = gr.iter().sum();
                    ga.extend(y.iter().zip(gr).map(|(yi, gi)| gi - yi.exp() * total));
                }
                send(*a, ga);
            }
            Op::Standardize(a, inv_std, train) => {
                let (b, f) = (out.rows(), out.cols());
                let mut ga = vec![0.0; b * f];
                if *train {
                    let mut sum_g = vec![0.0; f];
                    let mut sum_gy = vec![0.0; f];
                    for i in 0..b {
                        for j in 0..f {
                            sum_g[j] += g[i * f + j];
                            sum_gy[j] += g[i * f + j] * out.data()[i * f + j];
                        }
                    }
                    let nb = b as f64;
                    for i in 0..b {
                        for j in 0..f {
                            let y = out.data()[i * f + j];
                            ga[i * f + j] =
                                inv_std[j] / nb * (nb * g[i * f + j] - sum_g[j] - y * sum_gy[j]);
                        }
                    }
                } else {
                    for i in 0..b {
                        for j in 0..f {
                            ga[i * f + j] = g[i * f + j] * inv_std[j];
                        }
                    }
                }
                send(*a, ga);
            }
        }
    }
}

fn row_sum(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for chunk in g.chunks(cols) {
        out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
    }
    out
}
