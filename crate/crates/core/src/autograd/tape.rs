use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::kernels;
use super::{AutogradError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_PARAM_KEY: AtomicU64 = AtomicU64::new(1);

/// Identity of a [`Param`] across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey(u64);

/// A named trainable tensor with its accumulated gradient.
///
/// Gradients accumulate across [`Param::accumulate`] calls until
/// [`Param::zero_grad`] is called. Cloning yields a parameter with a fresh
/// key, so a clone and its source can never alias on one tape.
pub struct Param {
    key: ParamKey,
    name: String,
    pub value: Tensor,
    grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            key: ParamKey(NEXT_PARAM_KEY.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds this parameter's gradient from `grads`, if the tape saw it.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if let Some(g) = grads.param(self.key) {
            for (acc, v) in self.grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self {
            key: ParamKey(NEXT_PARAM_KEY.fetch_add(1, Ordering::Relaxed)),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.value.shape())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Backward rule for an operation defined outside this module.
///
/// Receives the input values, the output value and the upstream gradient,
/// and returns one gradient per input (`None` where it does not flow).
pub trait CustomBackward {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    DivScalar(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    LogSoftmax(usize, Vec<usize>),
    Softmax(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Slice { input: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Clamp(usize, f64, f64),
    Custom(Vec<usize>, Box<dyn CustomBackward>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) | Op::AddRow(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) | Op::DivScalar(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Softmax(..) => "softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Clamp(..) => "clamp",
            Op::Custom(_, c) => c.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of tensor operations for reverse accumulation.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction. A tape is meant to live for one forward/backward
/// pass and then be dropped.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamKey, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

type OpResult = Result<Var, AutogradError>;

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, AutogradError> {
        if v.tape != self.id {
            return Err(AutogradError::ForeignTape);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op) -> OpResult {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op: op.name() });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            Op::Custom(inputs, _) | Op::Concat { inputs, .. } => {
                inputs.iter().any(|&i| self.nodes[i].needs_grad)
            }
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::DivScalar(a, b) => self.nodes[*a].needs_grad || self.nodes[*b].needs_grad,
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::LogSoftmax(a, _)
            | Op::Softmax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Slice { input: a, .. }
            | Op::Clamp(a, ..) => self.nodes[*a].needs_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    /// Records a tensor that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> OpResult {
        self.push(t, Op::Leaf)
    }

    /// Records a free variable that receives a gradient (used by
    /// [`grad_check`](super::grad_check) and tests).
    pub fn leaf(&mut self, t: Tensor) -> OpResult {
        let key = ParamKey(NEXT_PARAM_KEY.fetch_add(1, Ordering::Relaxed));
        let v = self.push(t, Op::Param)?;
        self.params.insert(key, v.idx);
        Ok(v)
    }

    /// Records a parameter. Recording the same parameter twice returns the
    /// same node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&idx) = self.params.get(&p.key) {
            return Var { tape: self.id, idx };
        }
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let idx = self.nodes.len() - 1;
        self.params.insert(p.key, idx);
        Var { tape: self.id, idx }
    }

    /// Copies a value into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> OpResult {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutogradError {
        AutogradError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.cols() != tb.rows() {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::new(m, n, kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        self.push(out, Op::MatMul(ia, ib))
    }

    /// Elementwise sum; `b` may also be a `1×n` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let out = Tensor::new(ta.rows(), ta.cols(), data)?;
            return self.push(out, Op::Add(ia, ib));
        }
        if tb.rows() == 1 && tb.cols() == ta.cols() {
            let n = ta.cols();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % n])
                .collect();
            let out = Tensor::new(ta.rows(), n, data)?;
            return self.push(out, Op::AddRow(ia, ib));
        }
        Err(Self::shape_err("add", ta, tb))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor), AutogradError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(ta.rows(), ta.cols(), data)?))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        let (ia, ib, out) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        let (ia, ib, out) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(ia, ib))
    }

    /// Elementwise quotient; `b` may also be a `1×1` scalar.
    pub fn div(&mut self, a: Var, b: Var) -> OpResult {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if tb.len() == 1 && ta.len() != 1 {
            let d = tb.data()[0];
            let data = ta.data().iter().map(|x| x / d).collect();
            let out = Tensor::new(ta.rows(), ta.cols(), data)?;
            return self.push(out, Op::DivScalar(ia, ib));
        }
        let (ia, ib, out) = self.zip_same(a, b, "div", |x, y| x / y)?;
        self.push(out, Op::Div(ia, ib))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor), AutogradError> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Ok((ia, Tensor::new(ta.rows(), ta.cols(), data)?))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> OpResult {
        let (ia, out) = self.map(a, |x| x * s)?;
        self.push(out, Op::Scale(ia, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> OpResult {
        let (ia, out) = self.map(a, |x| x + s)?;
        self.push(out, Op::AddScalar(ia))
    }

    pub fn neg(&mut self, a: Var) -> OpResult {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> OpResult {
        let (ia, out) = self.map(a, f64::tanh)?;
        self.push(out, Op::Tanh(ia))
    }

    pub fn sigmoid(&mut self, a: Var) -> OpResult {
        let (ia, out) = self.map(a, kernels::sigmoid)?;
        self.push(out, Op::Sigmoid(ia))
    }

    pub fn relu(&mut self, a: Var) -> OpResult {
        let (ia, out) = self.map(a, |x| x.max(0.0))?;
        self.push(out, Op::Relu(ia))
    }

    pub fn exp(&mut self, a: Var) -> OpResult {
        let (ia, out) = self.map(a, f64::exp)?;
        self.push(out, Op::Exp(ia))
    }

    pub fn ln(&mut self, a: Var) -> OpResult {
        let (ia, out) = self.map(a, f64::ln)?;
        self.push(out, Op::Ln(ia))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> OpResult {
        let (ia, out) = self.map(a, |x| x.clamp(lo, hi))?;
        self.push(out, Op::Clamp(ia, lo, hi))
    }

    fn check_branches(&self, ia: usize, branches: &[usize], name: &'static str) -> Result<(), AutogradError> {
        let t = &self.nodes[ia].value;
        if branches.iter().sum::<usize>() != t.cols() || branches.contains(&0) {
            return Err(AutogradError::Shape {
                op: name,
                lhs: t.shape().to_vec(),
                rhs: branches.to_vec(),
            });
        }
        Ok(())
    }

    /// Row-wise log-softmax applied separately to each branch segment.
    pub fn log_softmax(&mut self, a: Var, branches: &[usize]) -> OpResult {
        let ia = self.idx(a)?;
        self.check_branches(ia, branches, "log_softmax")?;
        let ta = &self.nodes[ia].value;
        let mut data = ta.data().to_vec();
        for r in 0..ta.rows() {
            kernels::log_softmax_branches(&mut data[r * ta.cols()..(r + 1) * ta.cols()], branches);
        }
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.push(out, Op::LogSoftmax(ia, branches.to_vec()))
    }

    /// Row-wise softmax applied separately to each branch segment.
    pub fn softmax(&mut self, a: Var, branches: &[usize]) -> OpResult {
        let ia = self.idx(a)?;
        self.check_branches(ia, branches, "softmax")?;
        let ta = &self.nodes[ia].value;
        let mut data = ta.data().to_vec();
        for r in 0..ta.rows() {
            kernels::log_softmax_branches(&mut data[r * ta.cols()..(r + 1) * ta.cols()], branches);
        }
        data.iter_mut().for_each(|v| *v = v.exp());
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.push(out, Op::Softmax(ia, branches.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> OpResult {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> OpResult {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(AutogradError::Empty { op: "mean" });
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(ia))
    }

    /// Sums each row, giving an `m×1` column.
    pub fn sum_rows(&mut self, a: Var) -> OpResult {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let out = Tensor::new(t.rows(), 1, data)?;
        self.push(out, Op::SumRows(ia))
    }

    /// Contiguous slice along `axis` (0 = rows, 1 = columns).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> OpResult {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let extent = if axis == 0 { t.rows() } else { t.cols() };
        if axis > 1 || start + len > extent || len == 0 {
            return Err(AutogradError::Shape {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let out = if axis == 0 {
            let c = t.cols();
            Tensor::new(len, c, t.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(t.rows() * len);
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row_slice(r)[start..start + len]);
            }
            Tensor::new(t.rows(), len, data)?
        };
        self.push(out, Op::Slice { input: ia, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> OpResult {
        if parts.is_empty() {
            return Err(AutogradError::Empty { op: "concat" });
        }
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        let first = &self.nodes[idxs[0]].value;
        let out = if axis == 0 {
            let c = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &i in &idxs {
                let t = &self.nodes[i].value;
                if t.cols() != c {
                    return Err(Self::shape_err("concat", first, t));
                }
                data.extend_from_slice(t.data());
                rows += t.rows();
            }
            Tensor::new(rows, c, data)?
        } else {
            let r = first.rows();
            let mut cols = 0;
            for &i in &idxs {
                let t = &self.nodes[i].value;
                if t.rows() != r {
                    return Err(Self::shape_err("concat", first, t));
                }
                cols += t.cols();
            }
            let mut data = Vec::with_capacity(r * cols);
            for row in 0..r {
                for &i in &idxs {
                    data.extend_from_slice(self.nodes[i].value.row_slice(row));
                }
            }
            Tensor::new(r, cols, data)?
        };
        self.push(out, Op::Concat { inputs: idxs, axis })
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomBackward>) -> OpResult {
        let idxs = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        self.push(output, Op::Custom(idxs, rule))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutogradError> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(AutogradError::NotScalar {
                shape: self.nodes[il].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut by_param = HashMap::new();
        for (&key, &idx) in &self.params {
            if let Some(g) = grads[idx].take() {
                by_param.insert(key, g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            shapes,
            by_param,
            param_nodes: self.params.iter().map(|(&k, &v)| (v, k)).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let mut add_to = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].needs_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                add_to(*a, &mut |s| kernels::matmul_grad_lhs(g, tb.data(), s, m, k, n));
                add_to(*b, &mut |s| kernels::matmul_grad_rhs(ta.data(), g, s, m, k, n));
            }
            Op::Add(a, b) => {
                add_to(*a, &mut |s| axpy(s, g, 1.0));
                add_to(*b, &mut |s| axpy(s, g, 1.0));
            }
            Op::AddRow(a, b) => {
                add_to(*a, &mut |s| axpy(s, g, 1.0));
                let n = out.cols();
                add_to(*b, &mut |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k % n] += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                add_to(*a, &mut |s| axpy(s, g, 1.0));
                add_to(*b, &mut |s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (nodes[*a].value.data(), nodes[*b].value.data());
                add_to(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * tb[k];
                    }
                });
                add_to(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * ta[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (nodes[*a].value.data(), nodes[*b].value.data());
                add_to(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / tb[k];
                    }
                });
                add_to(*b, &mut |s| {
                    for k in 0..s.len() {
                        s[k] -= g[k] * ta[k] / (tb[k] * tb[k]);
                    }
                });
            }
            Op::DivScalar(a, b) => {
                let ta = nodes[*a].value.data();
                let d = nodes[*b].value.data()[0];
                add_to(*a, &mut |s| axpy(s, g, 1.0 / d));
                add_to(*b, &mut |s| {
                    let dot: f64 = g.iter().zip(ta).map(|(gv, x)| gv * x).sum();
                    s[0] -= dot / (d * d);
                });
            }
            Op::Scale(a, c) => add_to(*a, &mut |s| axpy(s, g, *c)),
            Op::AddScalar(a) => add_to(*a, &mut |s| axpy(s, g, 1.0)),
            Op::Tanh(a) => {
                let y = out.data();
                add_to(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                add_to(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = nodes[*a].value.data();
                add_to(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                add_to(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k];
                    }
                });
            }
            Op::Ln(a) => {
                let x = nodes[*a].value.data();
                add_to(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / x[k];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = nodes[*a].value.data();
                add_to(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] >= *lo && x[k] <= *hi {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::LogSoftmax(a, branches) => {
                // d/dx_j = g_j - p_j * sum(g over the branch)
                let y = out.data();
                let c = out.cols();
                add_to(*a, &mut |s| {
                    for r in 0..out.rows() {
                        let mut start = r * c;
                        for &size in branches {
                            let gs: f64 = g[start..start + size].iter().sum();
                            for k in start..start + size {
                                s[k] += g[k] - y[k].exp() * gs;
                            }
                            start += size;
                        }
                    }
                });
            }
            Op::Softmax(a, branches) => {
                let y = out.data();
                let c = out.cols();
                add_to(*a, &mut |s| {
                    for r in 0..out.rows() {
                        let mut start = r * c;
                        for &size in branches {
                            let dot: f64 = (start..start + size).map(|k| g[k] * y[k]).sum();
                            for k in start..start + size {
                                s[k] += y[k] * (g[k] - dot);
                            }
                            start += size;
                        }
                    }
                });
            }
            Op::Sum(a) => add_to(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = nodes[*a].value.len() as f64;
                add_to(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SumRows(a) => {
                let c = nodes[*a].value.cols();
                add_to(*a, &mut |s| {
                    for (k, v) in s.iter_mut().enumerate() {
                        *v += g[k / c];
                    }
                });
            }
            Op::Slice { input, axis, start } => {
                let src_cols = nodes[*input].value.cols();
                add_to(*input, &mut |s| {
                    if *axis == 0 {
                        let off = start * src_cols;
                        axpy(&mut s[off..off + g.len()], g, 1.0);
                    } else {
                        let len = out.cols();
                        for r in 0..out.rows() {
                            let dst = &mut s[r * src_cols + start..r * src_cols + start + len];
                            axpy(dst, &g[r * len..(r + 1) * len], 1.0);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &j in inputs {
                        let n = nodes[j].value.len();
                        add_to(j, &mut |s| axpy(s, &g[off..off + n], 1.0));
                        off += n;
                    }
                } else {
                    let total = out.cols();
                    let mut col = 0;
                    for &j in inputs {
                        let w = nodes[j].value.cols();
                        add_to(j, &mut |s| {
                            for r in 0..out.rows() {
                                axpy(&mut s[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w], 1.0);
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::Custom(inputs, rule) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&j| &nodes[j].value).collect();
                let parts = rule.backward(&vals, out, g);
                for (&j, part) in inputs.iter().zip(parts) {
                    if let Some(p) = part {
                        add_to(j, &mut |s| axpy(s, &p, 1.0));
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<[usize; 2]>,
    by_param: HashMap<ParamKey, Vec<f64>>,
    param_nodes: HashMap<usize, ParamKey>,
}

impl Gradients {
    /// Gradient with respect to a recorded node; zeros when the loss does
    /// not depend on it.
    pub fn wrt(&self, v: Var) -> Result<Tensor, AutogradError> {
        if v.tape != self.tape {
            return Err(AutogradError::ForeignTape);
        }
        let [r, c] = self.shapes[v.idx];
        let data = match self.param_nodes.get(&v.idx) {
            Some(key) => self.by_param.get(key).cloned(),
            None => self.nodes[v.idx].clone(),
        };
        Tensor::new(r, c, data.unwrap_or_else(|| vec![0.0; r * c]))
    }

    pub fn param(&self, key: ParamKey) -> Option<&[f64]> {
        self.by_param.get(&key).map(Vec::as_slice)
    }
}
