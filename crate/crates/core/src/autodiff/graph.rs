//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes the
//! forward value immediately and appends a node holding that value plus what
//! the backward rule needs. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and [`Graph::backward`] is a
//! single reverse sweep.

use std::fmt;

use super::tensor::{numel, split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this module (for instance the adaptive event
/// filter). Forward values are computed by the caller; the graph only needs
/// the vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, given the upstream gradient of
    /// the output. `None` means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Transpose(Var),
    Softmax { x: Var, axis: usize },
    L2Normalize { x: Var, axis: usize, eps: f64 },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    LayerNorm { x: Var, eps: f64 },
    DepthwiseConv { x: Var, kernel: Var, bias: Option<Var> },
    PointwiseConv { x: Var, weight: Var, bias: Option<Var> },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    ReduceSum { x: Var, axis: usize },
    SumAll(Var),
    Scale(Var, f64),
    Custom { op: Box<dyn CustomOp>, inputs: Vec<Var> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Transpose(_) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DepthwiseConv { .. } => "conv2d_depthwise",
            Op::PointwiseConv { .. } => "conv2d_pointwise",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::SumAll(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::Scale(x, _)
            | Op::Softmax { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::ReduceSum { x, .. } => vec![*x],
            Op::DepthwiseConv { x, kernel, bias } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Op::PointwiseConv { x, weight, bias } => {
                let mut v = vec![*x, *weight];
                v.extend(bias);
                v
            }
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. See the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Graph::backward`], one slot per leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; zeros of the leaf's shape when the loss does not
    /// reach it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::argument(format!("{op}: shape mismatch {a:?} vs {b:?}"))
}

/// Broadcast rule for binary elementwise ops: `b` matches `a`, is a trailing
/// suffix of `a` (repeated over leading dims), or holds a single value.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    a == b || numel(b) == 1 || (b.len() <= a.len() && a.ends_with(b))
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(g, c)| *g += c),
        None => *slot = Some(contrib),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(x: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Graph whose first leaves are `tensors`, in order, all tracked.
    pub fn with_leaves(tensors: &[Tensor]) -> (Graph, Vec<Var>) {
        let mut g = Graph::new();
        let vars = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        (g, vars)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf: gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Number of recorded nodes of the named kind (e.g. `"softmax"`).
    pub fn count_op(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite value produced by {}", op.name())));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Record an externally computed output of a [`CustomOp`].
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        self.push(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            output,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(mismatch(name, sa, sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let out = da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect();
        Ok(Tensor::from_parts(sa.to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    /// Swap the last two dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::argument(format!("transpose: need at least 2 dims, got {s:?}")));
        }
        let d = s.len();
        let (r, c) = (s[d - 2], s[d - 1]);
        let batch = numel(&s[..d - 2]);
        let out = transpose_raw(self.data(x), batch, r, c);
        let mut shape = s;
        shape.swap(d - 2, d - 1);
        self.push(Op::Transpose(x), Tensor::from_parts(shape, out))
    }

    fn check_axis(&self, name: &str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::argument(format!(
                "{name}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (xd[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        self.push(Op::Softmax { x, axis }, Tensor::from_parts(shape, out))
    }

    /// `x / sqrt(sum(x^2) + eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let norm = ((0..n).map(|j| xd[idx(j)].powi(2)).sum::<f64>() + eps).sqrt();
                for j in 0..n {
                    out[idx(j)] = xd[idx(j)] / norm;
                }
            }
        }
        self.push(Op::L2Normalize { x, axis, eps }, Tensor::from_parts(shape, out))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(x).map(f);
        self.push(op, v)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// Normalize over the last dimension (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensor has at least one dim");
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for (row, orow) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        self.push(Op::LayerNorm { x, eps }, Tensor::from_parts(shape, out))
    }

    /// Depthwise 2-D convolution, stride 1, zero padding `k/2`.
    ///
    /// `x` is `C×H×W`, `kernel` is `C×k×k` with odd `k`, `bias` is `[C]`.
    pub fn conv2d_depthwise(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 3 || sk[0] != sx[0] || sk[1] != sk[2] || sk[1].is_multiple_of(2) {
            return Err(mismatch("conv2d_depthwise", &sx, &sk));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sx[0]] {
                return Err(mismatch("conv2d_depthwise bias", &sx, self.shape(b)));
            }
        }
        let (c, h, w, k) = (sx[0], sx[1], sx[2], sk[1]);
        let r = (k / 2) as isize;
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let b = bias.map_or(0.0, |b| self.data(b)[ch]);
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            let ker = &kd[ch * k * k..(ch + 1) * k * k];
            let oplane = &mut out[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b;
                    for i in 0..k {
                        let sy = y as isize + i as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for j in 0..k {
                            let sxx = xx as isize + j as isize - r;
                            if sxx < 0 || sxx >= w as isize {
                                continue;
                            }
                            acc += ker[i * k + j] * plane[sy as usize * w + sxx as usize];
                        }
                    }
                    oplane[y * w + xx] = acc;
                }
            }
        }
        self.push(
            Op::DepthwiseConv { x, kernel, bias },
            Tensor::from_parts(vec![c, h, w], out),
        )
    }

    /// 1×1 convolution: `x` is `Cin×H×W`, `weight` is `Cout×Cin`, `bias` is `[Cout]`.
    pub fn conv2d_pointwise(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(mismatch("conv2d_pointwise", &sx, &sw));
        }
        let (cout, cin, hw) = (sw[0], sw[1], sx[1] * sx[2]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d_pointwise bias", &sw, self.shape(b)));
            }
        }
        let mut out = matmul_raw(self.data(weight), self.data(x), cout, cin, hw);
        if let Some(b) = bias {
            let bd = self.data(b);
            for (o, row) in out.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v += bd[o]);
            }
        }
        self.push(
            Op::PointwiseConv { x, weight, bias },
            Tensor::from_parts(vec![cout, sx[1], sx[2]], out),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(x)
            .reshape(shape)
            .map_err(|_| mismatch("reshape", self.shape(x), shape))?;
        self.push(Op::Reshape(x), v)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::argument("concat: no inputs"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        for v in &inputs[1..] {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
        }
        let total: usize = inputs.iter().map(|v| self.shape(*v)[axis]).sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let n = self.shape(*v)[axis];
                out.extend_from_slice(&self.data(*v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Tensor::from_parts(shape, out),
        )
    }

    /// Sum along `axis`, removing it (a 1-D input reduces to shape `[1]`).
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("reduce_sum", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * n + j) * inner + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter_map(|(d, &e)| (d != axis).then_some(e))
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.push(Op::ReduceSum { x, axis }, Tensor::from_parts(new_shape, out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::argument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contrib) in self.vjp(node, &g) {
                if self.nodes[input.0].needs_grad {
                    accumulate(&mut grads[input.0], contrib);
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].needs_grad => {
                    Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn reduce_broadcast(&self, b: Var, full: &[f64]) -> Vec<f64> {
        let nb = self.value(b).len();
        let mut out = vec![0.0; nb];
        for (i, v) in full.iter().enumerate() {
            out[i % nb] += v;
        }
        out
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn vjp(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let bt = transpose_raw(self.data(*b), 1, k, n);
                    out.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if self.needs(*b) {
                    let at = transpose_raw(self.data(*a), 1, m, k);
                    out.push((*b, matmul_raw(&at, g, k, m, n)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                if self.needs(*b) {
                    out.push((*b, self.reduce_broadcast(*b, g)));
                }
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    out.push((*b, self.reduce_broadcast(*b, &neg)));
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if self.needs(*a) {
                    out.push((*a, g.iter().enumerate().map(|(i, gv)| gv * db[i % nb]).collect()));
                }
                if self.needs(*b) {
                    let full: Vec<f64> = g.iter().zip(da).map(|(gv, av)| gv * av).collect();
                    out.push((*b, self.reduce_broadcast(*b, &full)));
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let d = s.len();
                let batch = numel(&s[..d - 2]);
                // g is laid out as (c, r); transposing back restores (r, c).
                out.push((*x, transpose_raw(g, batch, s[d - 1], s[d - 2])));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::L2Normalize { x, axis, eps } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let xd = self.data(*x);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let norm = ((0..n).map(|j| xd[idx(j)].powi(2)).sum::<f64>() + eps).sqrt();
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * xd[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = g[idx(j)] / norm - xd[idx(j)] * dot / norm.powi(3);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                out.push((
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sigmoid(x) => {
                out.push((*x, g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect()));
            }
            Op::Tanh(x) => {
                out.push((*x, g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect()));
            }
            Op::Exp(x) => {
                out.push((*x, g.iter().zip(y).map(|(gv, e)| gv * e).collect()));
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                out.push((*x, g.iter().zip(xd).map(|(gv, v)| gv * sign(*v)).collect()));
            }
            Op::Scale(x, s) => {
                out.push((*x, g.iter().map(|gv| gv * s).collect()));
            }
            Op::LayerNorm { x, eps } => {
                let xd = self.data(*x);
                let d = *self.shape(*x).last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((row, grow), (orow, dxrow)) in xd.chunks(d).zip(g.chunks(d)).zip(y.chunks(d).zip(dx.chunks_mut(d)))
                {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = grow.iter().sum::<f64>() / d as f64;
                    let gy = grow.iter().zip(orow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dxrow[j] = inv * (grow[j] - gmean - orow[j] * gy);
                    }
                }
                out.push((*x, dx));
            }
            Op::DepthwiseConv { x, kernel, bias } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                let k = self.shape(*kernel)[1];
                let r = (k / 2) as isize;
                let xd = self.data(*x);
                let kd = self.data(*kernel);
                let mut dx = vec![0.0; xd.len()];
                let mut dk = vec![0.0; kd.len()];
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            let gv = g[(ch * h + yy) * w + xx];
                            if gv == 0.0 {
                                continue;
                            }
                            for i in 0..k {
                                let sy = yy as isize + i as isize - r;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for j in 0..k {
                                    let sx = xx as isize + j as isize - r;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let xi = (ch * h + sy as usize) * w + sx as usize;
                                    let ki = (ch * k + i) * k + j;
                                    dx[xi] += gv * kd[ki];
                                    dk[ki] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*kernel, dk));
                if let Some(b) = bias {
                    let hw = h * w;
                    out.push((*b, g.chunks(hw).map(|p| p.iter().sum()).collect()));
                }
            }
            Op::PointwiseConv { x, weight, bias } => {
                let sw = self.shape(*weight);
                let (cout, cin) = (sw[0], sw[1]);
                let sx = self.shape(*x);
                let hw = sx[1] * sx[2];
                if self.needs(*x) {
                    let wt = transpose_raw(self.data(*weight), 1, cout, cin);
                    out.push((*x, matmul_raw(&wt, g, cin, cout, hw)));
                }
                if self.needs(*weight) {
                    let xt = transpose_raw(self.data(*x), 1, cin, hw);
                    out.push((*weight, matmul_raw(g, &xt, cout, hw, cin)));
                }
                if let Some(b) = bias {
                    out.push((*b, g.chunks(hw).map(|p| p.iter().sum()).collect()));
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let (outer, _, inner) = split_axis(base, *axis);
                let total: usize = inputs.iter().map(|v| self.shape(*v)[*axis]).sum();
                let mut offset = 0;
                for v in inputs {
                    let n = self.shape(*v)[*axis];
                    let mut dv = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dv.extend_from_slice(&g[start..start + n * inner]);
                    }
                    offset += n;
                    out.push((*v, dv));
                }
            }
            Op::ReduceSum { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            dx[(o * n + j) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::SumAll(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Custom { op, inputs } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                for (v, contrib) in inputs.iter().zip(op.backward(&tensors, &node.value, g)) {
                    if let Some(c) = contrib {
                        out.push((*v, c));
                    }
                }
            }
        }
        out
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
