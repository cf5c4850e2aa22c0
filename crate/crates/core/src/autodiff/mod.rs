//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records operations in topological order while computing their
//! values eagerly, so model code can be written with ordinary control flow.
//! The recorded graph can be re-run with new input bindings through
//! [`Graph::evaluate`], and [`Graph::backward`] propagates the gradient of a
//! scalar node to every tracked leaf.

mod check;
mod params;
pub(crate) mod suite;

pub use check::{finite_difference_check, finite_difference_check_inputs, param_gradcheck, GradCheckReport};
pub use suite::op_gradcheck_suite;
pub use params::{load_checkpoint, save_checkpoint, Gradients, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, linear_recurrence_scan, sigmoid, softplus, Tensor};

/// Variance floor of the layer normalization denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Leaf {
    Input(String),
    Param(String),
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(Leaf),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Reshape(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>, usize),
    GaussianLogDensity(Var, Var, Var),
    LinearScan(Var, Var, Var),
    StopGradient(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Square(_) => "square",
            Op::Clamp(..) => "clamp",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::Concat(_) => "concat",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::GaussianLogDensity(..) => "gaussian_log_density",
            Op::LinearScan(..) => "linear_scan",
            Op::StopGradient(_) => "stop_gradient",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::LeakyRelu(a, _)
            | Op::Square(a)
            | Op::Clamp(a, ..)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LayerNorm(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::Slice(a, ..)
            | Op::Reshape(a, _)
            | Op::GatherRows(a, _)
            | Op::SegmentSum(a, ..)
            | Op::StopGradient(a) => vec![*a],
            Op::Concat(xs) => xs.clone(),
            Op::GaussianLogDensity(a, b, c) | Op::LinearScan(a, b, c) => vec![*a, *b, *c],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    tracked: bool,
}

/// How a binary operand is broadcast against the output.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Full,
    Scalar,
    Row,
}

fn bcast_kind(operand: &[usize], out: &[usize]) -> Option<Bcast> {
    if operand == out {
        Some(Bcast::Full)
    } else if operand.iter().product::<usize>() == 1 {
        Some(Bcast::Scalar)
    } else if operand.len() == 1 && out.len() >= 2 && out.last() == operand.last() {
        Some(Bcast::Row)
    } else {
        None
    }
}

#[inline]
fn bcast_at(data: &[f64], kind: Bcast, i: usize, width: usize) -> f64 {
    match kind {
        Bcast::Full => data[i],
        Bcast::Scalar => data[0],
        Bcast::Row => data[i % width],
    }
}

fn reduce_to(g: &Tensor, kind: Bcast, shape: &[usize]) -> Tensor {
    match kind {
        Bcast::Full => g.clone(),
        Bcast::Scalar => Tensor::full(shape, g.sum()),
        Bcast::Row => {
            let w = g.last_dim();
            let mut out = vec![0.0; w];
            for (i, v) in g.data().iter().enumerate() {
                out[i % w] += v;
            }
            Tensor::new(shape.to_vec(), out).expect("row reduction shape")
        }
    }
}

/// Recorded computation. Values are computed as nodes are added.
#[derive(Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<(String, bool), Var>,
    outputs: BTreeMap<String, Var>,
    grads: Vec<Option<Tensor>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] seed with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---- leaves -------------------------------------------------------

    fn leaf(&mut self, leaf: Leaf, value: Arc<Tensor>, tracked: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf(leaf), value, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Named input; tracked so gradients with respect to it are available.
    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        self.leaf(Leaf::Input(name.to_string()), Arc::new(value), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Leaf::Constant, Arc::new(value), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a trainable parameter. Repeated bindings share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        self.bind_param(store, name, false)
    }

    /// Binds a parameter whose gradient is blocked: it behaves as a constant
    /// holding the current parameter value.
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        self.bind_param(store, name, true)
    }

    fn bind_param(&mut self, store: &ParamStore, name: &str, frozen: bool) -> Result<Var> {
        let key = (name.to_string(), frozen);
        if let Some(&v) = self.param_cache.get(&key) {
            return Ok(v);
        }
        let value = store.shared(name)?;
        let v = if frozen {
            self.leaf(Leaf::Constant, value, false)
        } else {
            self.leaf(Leaf::Param(name.to_string()), value, true)
        };
        self.param_cache.insert(key, v);
        Ok(v)
    }

    pub fn mark_output(&mut self, name: &str, v: Var) {
        self.outputs.insert(name.to_string(), v);
    }

    // ---- op construction ----------------------------------------------

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.compute(&op, self.nodes.len())?;
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { node: id, op: op.name() });
        }
        let tracked = match &op {
            Op::StopGradient(_) => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].tracked),
        };
        self.nodes.push(Node { op, value: Arc::new(value), tracked });
        Ok(Var(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }
    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        self.push(Op::Offset(a, shift))
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Scale(a, -1.0))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus(a))
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.push(Op::LeakyRelu(a, slope))
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.push(Op::Clamp(a, lo, hi))
    }
    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a))
    }
    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LayerNorm(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }
    /// Sum over the last axis; drops that axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumLast(a))
    }
    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::Concat(xs.to_vec()))
    }
    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice(a, start, len))
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    /// Selects entries along axis 0.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(a, indices))
    }
    /// Sums entries along axis 0 into `segments` buckets.
    pub fn segment_sum(&mut self, a: Var, segment_ids: Vec<usize>, segments: usize) -> Result<Var> {
        self.push(Op::SegmentSum(a, segment_ids, segments))
    }
    /// Diagonal Gaussian log-density of `x`, summed over the last axis.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, log_std: Var) -> Result<Var> {
        self.push(Op::GaussianLogDensity(x, mean, log_std))
    }
    /// `x_t = decay ⊙ x_{t-1} + inputs_t` over `inputs: [B, T, N]` from `init: [B, N]`.
    pub fn linear_scan(&mut self, decay: Var, inputs: Var, init: Var) -> Result<Var> {
        self.push(Op::LinearScan(decay, inputs, init))
    }
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.push(Op::StopGradient(a))
    }

    // ---- forward --------------------------------------------------------

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: a.0,
            left_shape: self.val(a).shape().to_vec(),
            right: b.0,
            right_shape: self.val(b).shape().to_vec(),
        }
    }

    fn check_parent(&self, v: Var, id: usize) -> Result<()> {
        if v.0 >= id {
            return Err(Error::Shape(format!("node {id} refers to later node {}", v.0)));
        }
        Ok(())
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if let Some(kb) = bcast_kind(sb, sa) {
            return Ok((sa.to_vec(), Bcast::Full, kb));
        }
        if let Some(ka) = bcast_kind(sa, sb) {
            return Ok((sb.to_vec(), ka, Bcast::Full));
        }
        Err(self.mismatch(op, a, b))
    }

    fn elementwise(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.val(a).map(f)
    }

    fn compute(&self, op: &Op, id: usize) -> Result<Tensor> {
        for p in op.parents() {
            self.check_parent(p, id)?;
        }
        let t = match op {
            Op::Leaf(_) => unreachable!("leaves are not recomputed"),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                    return Err(self.mismatch("matmul", *a, *b));
                }
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, ta.data(), tb.data(), &mut out);
                Tensor::new(vec![m, n], out)?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let name = op.name();
                let (shape, ka, kb) = self.binary_shape(name, *a, *b)?;
                let (da, db) = (self.val(*a).data(), self.val(*b).data());
                let numel: usize = shape.iter().product();
                let w = shape.last().copied().unwrap_or(1);
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = (0..numel)
                    .map(|i| f(bcast_at(da, ka, i, w), bcast_at(db, kb, i, w)))
                    .collect();
                Tensor::new(shape, data)?
            }
            Op::Scale(a, c) => self.elementwise(*a, |x| x * c),
            Op::Offset(a, c) => self.elementwise(*a, |x| x + c),
            Op::Exp(a) => self.elementwise(*a, f64::exp),
            Op::Log(a) => self.elementwise(*a, f64::ln),
            Op::Tanh(a) => self.elementwise(*a, f64::tanh),
            Op::Sigmoid(a) => self.elementwise(*a, sigmoid),
            Op::Softplus(a) => self.elementwise(*a, softplus),
            Op::LeakyRelu(a, s) => self.elementwise(*a, |x| if x > 0.0 { x } else { s * x }),
            Op::Square(a) => self.elementwise(*a, |x| x * x),
            Op::Clamp(a, lo, hi) => self.elementwise(*a, |x| x.clamp(*lo, *hi)),
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let x = self.val(*a);
                let w = x.last_dim();
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(w.max(1)) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let lse = max + z.ln();
                    for v in row.iter_mut() {
                        *v = if matches!(op, Op::Softmax(_)) { (*v - lse).exp() } else { *v - lse };
                    }
                }
                out
            }
            Op::LayerNorm(a) => {
                let x = self.val(*a);
                let w = x.last_dim();
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(w.max(1)) {
                    let mean = row.iter().sum::<f64>() / w as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mean) * inv;
                    }
                }
                out
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Mean(a) => {
                let x = self.val(*a);
                Tensor::scalar(x.sum() / x.numel().max(1) as f64)
            }
            Op::SumLast(a) => {
                let x = self.val(*a);
                let w = x.last_dim();
                let shape = x.shape()[..x.rank().saturating_sub(1)].to_vec();
                let data = if w == 0 {
                    vec![0.0; shape.iter().product()]
                } else {
                    x.data().chunks(w).map(|r| r.iter().sum()).collect()
                };
                Tensor::new(shape, data)?
            }
            Op::Concat(xs) => {
                if xs.is_empty() {
                    return Err(Error::Shape("concat of zero tensors".into()));
                }
                let first = self.val(xs[0]);
                let lead = &first.shape()[..first.rank().saturating_sub(1)];
                let rows = first.rows();
                let mut width = 0;
                for x in xs {
                    let t = self.val(*x);
                    if t.rank() == 0 || t.rank() != first.rank() || &t.shape()[..t.rank() - 1] != lead {
                        return Err(self.mismatch("concat", xs[0], *x));
                    }
                    width += t.last_dim();
                }
                let mut data = Vec::with_capacity(rows * width);
                for r in 0..rows {
                    for x in xs {
                        let t = self.val(*x);
                        let w = t.last_dim();
                        data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(width);
                Tensor::new(shape, data)?
            }
            Op::Slice(a, start, len) => {
                let x = self.val(*a);
                let w = x.last_dim();
                if start + len > w || x.rank() == 0 {
                    return Err(Error::Shape(format!(
                        "slice {start}..{} out of range for node {} of shape {:?}",
                        start + len,
                        a.0,
                        x.shape()
                    )));
                }
                let mut data = Vec::with_capacity(x.rows() * len);
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.data()[r * w + start..r * w + start + len]);
                }
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = *len;
                Tensor::new(shape, data)?
            }
            Op::Reshape(a, shape) => self.val(*a).clone().reshape(shape)?,
            Op::GatherRows(a, idx) => {
                let x = self.val(*a);
                if x.rank() == 0 {
                    return Err(Error::Shape(format!("gather_rows on scalar node {}", a.0)));
                }
                let n0 = x.shape()[0];
                let inner = if n0 == 0 { 0 } else { x.numel() / n0 };
                let mut data = Vec::with_capacity(idx.len() * inner);
                for &i in idx {
                    if i >= n0 {
                        return Err(Error::Shape(format!(
                            "gather index {i} out of range for node {} with {n0} rows",
                            a.0
                        )));
                    }
                    data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[0] = idx.len();
                Tensor::new(shape, data)?
            }
            Op::SegmentSum(a, ids, segments) => {
                let x = self.val(*a);
                if x.rank() == 0 || x.shape()[0] != ids.len() {
                    return Err(Error::Shape(format!(
                        "segment_sum needs {} rows, node {} has shape {:?}",
                        ids.len(),
                        a.0,
                        x.shape()
                    )));
                }
                let inner = if ids.is_empty() { x.numel() } else { x.numel() / ids.len() };
                let mut data = vec![0.0; segments * inner];
                for (r, &s) in ids.iter().enumerate() {
                    if s >= *segments {
                        return Err(Error::Shape(format!("segment id {s} >= {segments}")));
                    }
                    for k in 0..inner {
                        data[s * inner + k] += x.data()[r * inner + k];
                    }
                }
                let mut shape = x.shape().to_vec();
                shape[0] = *segments;
                Tensor::new(shape, data)?
            }
            Op::GaussianLogDensity(x, mean, log_std) => {
                let tx = self.val(*x);
                let shape = tx.shape().to_vec();
                let km = bcast_kind(self.val(*mean).shape(), &shape)
                    .ok_or_else(|| self.mismatch("gaussian_log_density", *x, *mean))?;
                let ks = bcast_kind(self.val(*log_std).shape(), &shape)
                    .ok_or_else(|| self.mismatch("gaussian_log_density", *x, *log_std))?;
                let (dm, ds) = (self.val(*mean).data(), self.val(*log_std).data());
                let w = tx.last_dim();
                let mut out = vec![0.0; tx.rows()];
                for (i, xv) in tx.data().iter().enumerate() {
                    let (m, s) = (bcast_at(dm, km, i, w), bcast_at(ds, ks, i, w));
                    let z = (xv - m) * (-s).exp();
                    out[i / w] += -0.5 * z * z - s - HALF_LN_2PI;
                }
                Tensor::new(shape[..shape.len().saturating_sub(1)].to_vec(), out)?
            }
            Op::LinearScan(decay, inputs, init) => {
                let (td, tu, t0) = (self.val(*decay), self.val(*inputs), self.val(*init));
                if tu.rank() != 3 {
                    return Err(Error::Shape(format!("linear_scan inputs must be [B,T,N], got {:?}", tu.shape())));
                }
                let (b, t, n) = (tu.shape()[0], tu.shape()[1], tu.shape()[2]);
                if td.shape() != [n] {
                    return Err(self.mismatch("linear_scan", *decay, *inputs));
                }
                if t0.shape() != [b, n] {
                    return Err(self.mismatch("linear_scan", *init, *inputs));
                }
                let mut out = Vec::with_capacity(b * t * n);
                for bi in 0..b {
                    out.extend(linear_recurrence_scan(
                        td.data(),
                        &tu.data()[bi * t * n..(bi + 1) * t * n],
                        &t0.data()[bi * n..(bi + 1) * n],
                    ));
                }
                Tensor::new(vec![b, t, n], out)?
            }
            Op::StopGradient(a) => self.val(*a).clone(),
        };
        Ok(t)
    }

    /// Rebinds the named inputs and recomputes every node in order.
    /// Returns the values of the nodes registered with [`Graph::mark_output`].
    pub fn evaluate(&mut self, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        for (name, value) in inputs {
            let mut found = false;
            for node in self.nodes.iter_mut() {
                if let Op::Leaf(Leaf::Input(n)) = &node.op {
                    if n == name {
                        node.value = Arc::new(value.clone());
                        found = true;
                    }
                }
            }
            if !found {
                return Err(Error::UnboundInput(name.clone()));
            }
        }
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf(_)) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let value = self.compute(&op, id)?;
            if !value.all_finite() {
                return Err(Error::NonFinite { node: id, op: op.name() });
            }
            self.nodes[id].value = Arc::new(value);
        }
        self.grads.clear();
        Ok(self
            .outputs
            .iter()
            .map(|(k, v)| (k.clone(), (*self.nodes[v.0].value).clone()))
            .collect())
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `seed` with respect to every trainable
    /// parameter bound in this graph. Per-node gradients (including inputs)
    /// stay available through [`Graph::grad`] until the next call.
    pub fn backward(&mut self, seed: Var) -> Result<Gradients> {
        let sv = self.val(seed);
        if sv.numel() != 1 {
            return Err(Error::NonScalarSeed { node: seed.0, shape: sv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(Tensor::full(sv.shape(), 1.0));
        for id in (0..=seed.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Leaf::Param(name)) = &node.op {
                let g = grads[id].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.accumulate(name, g);
            }
        }
        self.grads = grads;
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        let unary = |a: &Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            // f(x, y, g)
            let x = self.val(*a);
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((xv, yv), gv)| f(*xv, *yv, *gv))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("unary gradient shape")
        };
        match &node.op {
            Op::Leaf(_) | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].tracked {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), tb.data(), &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.nodes[b.0].tracked {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, ta.data(), g.data(), &mut db);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (shape, ka, kb) = self.binary_shape(node.op.name(), *a, *b)?;
                let w = shape.last().copied().unwrap_or(1);
                let (da, db) = (self.val(*a).data(), self.val(*b).data());
                let (ga, gb): (Tensor, Tensor) = match node.op {
                    Op::Add(..) => (g.clone(), g.clone()),
                    Op::Sub(..) => (g.clone(), g.map(|v| -v)),
                    _ => {
                        let ga = g.data().iter().enumerate().map(|(i, gv)| gv * bcast_at(db, kb, i, w)).collect();
                        let gb = g.data().iter().enumerate().map(|(i, gv)| gv * bcast_at(da, ka, i, w)).collect();
                        (Tensor::new(shape.clone(), ga)?, Tensor::new(shape.clone(), gb)?)
                    }
                };
                if self.nodes[a.0].tracked {
                    let sa = self.val(*a).shape().to_vec();
                    self.accumulate(grads, *a, reduce_to(&ga, ka, &sa));
                }
                if self.nodes[b.0].tracked {
                    let sb = self.val(*b).shape().to_vec();
                    self.accumulate(grads, *b, reduce_to(&gb, kb, &sb));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Offset(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, *a, unary(a, &|_, y, g| g * y)),
            Op::Log(a) => self.accumulate(grads, *a, unary(a, &|x, _, g| g / x)),
            Op::Tanh(a) => self.accumulate(grads, *a, unary(a, &|_, y, g| g * (1.0 - y * y))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, unary(a, &|_, y, g| g * y * (1.0 - y))),
            Op::Softplus(a) => self.accumulate(grads, *a, unary(a, &|x, _, g| g * sigmoid(x))),
            Op::LeakyRelu(a, s) => {
                self.accumulate(grads, *a, unary(a, &|x, _, g| if x > 0.0 { g } else { g * s }))
            }
            Op::Square(a) => self.accumulate(grads, *a, unary(a, &|x, _, g| 2.0 * x * g)),
            Op::Clamp(a, lo, hi) => self.accumulate(
                grads,
                *a,
                unary(a, &|x, _, g| if x >= *lo && x <= *hi { g } else { 0.0 }),
            ),
            Op::Softmax(a) => {
                let w = y.last_dim().max(1);
                let mut dx = g.clone();
                for (row, (yr, gr)) in dx.data_mut().chunks_mut(w).zip(y.data().chunks(w).zip(g.data().chunks(w))) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in row.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let w = y.last_dim().max(1);
                let mut dx = g.clone();
                for (row, (yr, gr)) in dx.data_mut().chunks_mut(w).zip(y.data().chunks(w).zip(g.data().chunks(w))) {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, yv), gv) in row.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm(a) => {
                let x = self.val(*a);
                let w = x.last_dim().max(1);
                let mut dx = g.clone();
                for (r, row) in dx.data_mut().chunks_mut(w).enumerate() {
                    let xr = &x.data()[r * w..(r + 1) * w];
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let gr = &g.data()[r * w..(r + 1) * w];
                    let mean = xr.iter().sum::<f64>() / w as f64;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let gmean = gr.iter().sum::<f64>() / w as f64;
                    let gymean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for ((d, gv), yv) in row.iter_mut().zip(gr).zip(yr) {
                        *d = inv * (gv - gmean - yv * gymean);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let s = self.val(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&s, g.data()[0]));
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let n = x.numel().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(x.shape(), g.data()[0] / n));
            }
            Op::SumLast(a) => {
                let x = self.val(*a);
                let w = x.last_dim();
                let data = (0..x.numel()).map(|i| g.data()[i / w.max(1)]).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Concat(xs) => {
                let rows = y.rows();
                let total = y.last_dim();
                let mut start = 0;
                for x in xs {
                    let t = self.val(*x);
                    let w = t.last_dim();
                    if self.nodes[x.0].tracked {
                        let mut data = Vec::with_capacity(t.numel());
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                        }
                        self.accumulate(grads, *x, Tensor::new(t.shape().to_vec(), data)?);
                    }
                    start += w;
                }
            }
            Op::Slice(a, start, len) => {
                let x = self.val(*a);
                let w = x.last_dim();
                let mut dx = Tensor::zeros(x.shape());
                for r in 0..x.rows() {
                    dx.data_mut()[r * w + start..r * w + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Reshape(a, _) => {
                let s = self.val(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&s)?);
            }
            Op::GatherRows(a, idx) => {
                let x = self.val(*a);
                let inner = if x.shape()[0] == 0 { 0 } else { x.numel() / x.shape()[0] };
                let mut dx = Tensor::zeros(x.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..inner {
                        dx.data_mut()[i * inner + k] += g.data()[r * inner + k];
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::SegmentSum(a, ids, _) => {
                let x = self.val(*a);
                let inner = if ids.is_empty() { 0 } else { x.numel() / ids.len() };
                let mut data = Vec::with_capacity(x.numel());
                for &s in ids {
                    data.extend_from_slice(&g.data()[s * inner..(s + 1) * inner]);
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::GaussianLogDensity(x, mean, log_std) => {
                let tx = self.val(*x);
                let shape = tx.shape().to_vec();
                let km = bcast_kind(self.val(*mean).shape(), &shape).expect("checked in forward");
                let ks = bcast_kind(self.val(*log_std).shape(), &shape).expect("checked in forward");
                let (dm, ds) = (self.val(*mean).data(), self.val(*log_std).data());
                let w = tx.last_dim();
                let n = tx.numel();
                let (mut gx, mut gm, mut gs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for (i, xv) in tx.data().iter().enumerate() {
                    let (m, s) = (bcast_at(dm, km, i, w), bcast_at(ds, ks, i, w));
                    let inv = (-s).exp();
                    let z = (xv - m) * inv;
                    let gr = g.data()[i / w];
                    gx[i] = -z * inv * gr;
                    gm[i] = z * inv * gr;
                    gs[i] = (z * z - 1.0) * gr;
                }
                if self.nodes[x.0].tracked {
                    self.accumulate(grads, *x, Tensor::new(shape.clone(), gx)?);
                }
                if self.nodes[mean.0].tracked {
                    let sm = self.val(*mean).shape().to_vec();
                    self.accumulate(grads, *mean, reduce_to(&Tensor::new(shape.clone(), gm)?, km, &sm));
                }
                if self.nodes[log_std.0].tracked {
                    let ss = self.val(*log_std).shape().to_vec();
                    self.accumulate(grads, *log_std, reduce_to(&Tensor::new(shape, gs)?, ks, &ss));
                }
            }
            Op::LinearScan(decay, inputs, init) => {
                let (td, tu, t0) = (self.val(*decay), self.val(*inputs), self.val(*init));
                let (b, t, n) = (tu.shape()[0], tu.shape()[1], tu.shape()[2]);
                let a = td.data();
                let xs = y.data();
                let mut gu = vec![0.0; b * t * n];
                let mut g0 = vec![0.0; b * n];
                let mut ga = vec![0.0; n];
                for bi in 0..b {
                    let mut carry = vec![0.0; n];
                    for ti in (0..t).rev() {
                        let base = (bi * t + ti) * n;
                        for i in 0..n {
                            let lam = g.data()[base + i] + carry[i];
                            gu[base + i] = lam;
                            let prev = if ti == 0 { t0.data()[bi * n + i] } else { xs[base - n + i] };
                            ga[i] += lam * prev;
                            carry[i] = a[i] * lam;
                        }
                    }
                    g0[bi * n..(bi + 1) * n].copy_from_slice(&carry);
                }
                if self.nodes[decay.0].tracked {
                    self.accumulate(grads, *decay, Tensor::new(vec![n], ga)?);
                }
                if self.nodes[inputs.0].tracked {
                    self.accumulate(grads, *inputs, Tensor::new(vec![b, t, n], gu)?);
                }
                if self.nodes[init.0].tracked {
                    self.accumulate(grads, *init, Tensor::new(vec![b, n], g0)?);
                }
            }
        }
        Ok(())
    }
}
