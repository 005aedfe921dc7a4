use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{Element, Result, Tensor, TensorError};

/// Handle to a value stored on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Every op appends a tape entry so `backward` can run.
    Recording,
    /// Values are computed but nothing is appended to the tape.
    Inference,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Clamp { x: usize, lo: T, hi: T },
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum { x: usize, axes: Vec<usize> },
    Mean { x: usize, axes: Vec<usize> },
    AddBias { x: usize, bias: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    AvgPool2(usize),
    Resize(usize),
    Concat { parts: Vec<usize>, axis: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Sum { .. } => "reduce_sum",
            Op::Mean { .. } => "reduce_mean",
            Op::AddBias { .. } => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Resize(_) => "resize_nearest",
            Op::Concat { .. } => "concat",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::AvgPool2(a)
            | Op::Resize(a) => vec![*a],
            Op::Clamp { x, .. } | Op::Sum { x, .. } | Op::Mean { x, .. } => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    out: usize,
    op: Op<T>,
}

/// Read-only view of one recorded tape entry.
#[derive(Clone, Debug)]
pub struct NodeInfo {
    pub id: usize,
    pub op: &'static str,
    pub parents: Vec<usize>,
    pub shape: Vec<usize>,
}

/// A single forward computation. One training step owns one graph.
pub struct Graph<T: Element> {
    mode: Mode,
    values: Vec<Tensor<T>>,
    requires_grad: Vec<bool>,
    tape: Vec<Entry<T>>,
    params: BTreeMap<usize, usize>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Element>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    match t.first_non_finite() {
        Some(index) => Err(TensorError::NonFinite { op, index }),
        None => Ok(()),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::with_mode(Mode::Recording)
    }

    pub fn inference() -> Self {
        Self::with_mode(Mode::Inference)
    }

    pub fn with_mode(mode: Mode) -> Self {
        Graph {
            mode,
            values: Vec::new(),
            requires_grad: Vec::new(),
            tape: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.mode == Mode::Recording
    }

    /// Number of tape entries (always 0 in inference mode).
    pub fn node_count(&self) -> usize {
        self.tape.len()
    }

    pub fn node(&self, index: usize) -> Option<NodeInfo> {
        self.tape.get(index).map(|e| NodeInfo {
            id: e.out,
            op: e.op.name(),
            parents: e.op.parents(),
            shape: self.values[e.out].shape().to_vec(),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn push_leaf(&mut self, t: Tensor<T>, grad: bool) -> Result<Var> {
        check_finite("leaf", &t)?;
        let id = self.values.len();
        self.values.push(t);
        let record = grad && self.is_recording();
        self.requires_grad.push(record);
        if record {
            self.tape.push(Entry { out: id, op: Op::Leaf });
        }
        Ok(Var(id))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push_leaf(t, false)
    }

    /// A differentiable leaf that is not a model parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push_leaf(t, true)
    }

    /// Registers model parameter `id`; its gradient is reported by
    /// [`Gradients::param`], as an explicit zero when disconnected.
    pub fn param(&mut self, id: usize, t: Tensor<T>) -> Result<Var> {
        let v = self.push_leaf(t, true)?;
        if self.is_recording() {
            self.params.insert(id, v.0);
        }
        Ok(v)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        check_finite(op.name(), &value)?;
        let id = self.values.len();
        let grad = self.is_recording() && op.parents().iter().any(|&p| self.requires_grad[p]);
        self.values.push(value);
        self.requires_grad.push(grad);
        if grad {
            self.tape.push(Entry { out: id, op });
        }
        Ok(Var(id))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data: Vec<T> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let shape = if ta.is_scalar() { tb.shape() } else { ta.shape() };
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a.0, b.0), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a.0, b.0), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a.0, b.0), t)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(index) = self.values[b.0].data().iter().position(|v| v.is_zero()) {
            return Err(TensorError::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        let t = self.binary("div", a, b, |x, y| x / y)?;
        self.push(Op::Div(a.0, b.0), t)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(|x| -x);
        self.push(Op::Neg(a.0), t)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(|x| x.exp());
        self.push(Op::Exp(a.0), t)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let src = &self.values[a.0];
        if let Some(index) = src.data().iter().position(|&v| v <= T::zero()) {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value: src.data()[index].as_f64(),
            });
        }
        let t = src.map(|x| x.ln());
        self.push(Op::Log(a.0), t)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(|x| x * x);
        self.push(Op::Square(a.0), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let t = self.values[a.0].map(|x| x * c);
        self.push(Op::Scale(a.0, c), t)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let t = self.values[a.0].map(|x| x + c);
        self.push(Op::AddScalar(a.0), t)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a.0), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.values[a.0].map(stable_sigmoid);
        self.push(Op::Sigmoid(a.0), t)
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
        let t = self.values[a.0].map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.push(Op::Clamp { x: a.0, lo, hi }, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let t = Tensor::from_parts(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n));
        self.push(Op::MatMul(a.0, b.0), t)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        if ta.rank() != 2 {
            return Err(TensorError::invalid("transpose", format!("needs rank 2, got {:?}", ta.shape())));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let t = Tensor::from_parts(vec![c, r], kernels::transpose(ta.data(), r, c));
        self.push(Op::Transpose(a.0), t)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[a.0].reshape(shape)?;
        self.push(Op::Reshape(a.0), t)
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let b = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, &[b, rest])
    }

    fn check_axes(&self, op: &'static str, a: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let rank = self.values[a.0].rank();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&axis) = sorted.iter().find(|&&ax| ax >= rank) {
            return Err(TensorError::InvalidAxis { op, axis, rank });
        }
        Ok(sorted)
    }

    fn reduce(&self, a: Var, axes: &[usize]) -> Tensor<T> {
        let src = &self.values[a.0];
        let (shape, map) = kernels::reduction_map(src.shape(), axes);
        let n: usize = shape.iter().product();
        let mut out = vec![T::zero(); n];
        for (&v, &o) in src.data().iter().zip(&map) {
            out[o] = out[o] + v;
        }
        Tensor::from_parts(shape, out)
    }

    /// Sums over `axes` (removed from the shape). An empty axis list sums everything.
    pub fn reduce_sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = self.all_axes_if_empty(a, self.check_axes("reduce_sum", a, axes)?);
        let t = self.reduce(a, &axes);
        self.push(Op::Sum { x: a.0, axes }, t)
    }

    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = self.all_axes_if_empty(a, self.check_axes("reduce_mean", a, axes)?);
        let count: usize = axes.iter().map(|&ax| self.values[a.0].shape()[ax]).product();
        let inv = T::one() / T::from_usize(count).expect("count");
        let t = self.reduce(a, &axes).map(|v| v * inv);
        self.push(Op::Mean { x: a.0, axes }, t)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.reduce_sum(a, &[])
    }

    fn all_axes_if_empty(&self, a: Var, axes: Vec<usize>) -> Vec<usize> {
        if axes.is_empty() {
            (0..self.values[a.0].rank()).collect()
        } else {
            axes
        }
    }

    /// Adds `bias[c]` along axis 1 of a `[B, C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.values[x.0], &self.values[bias.0]);
        if tx.rank() < 2 || tb.rank() != 1 || tb.shape()[0] != tx.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % c])
            .collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(Op::AddBias { x: x.0, bias: bias.0 }, t)
    }

    /// Cross-correlation of NCHW `x` with `w[out, in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        if tx.rank() != 4 || tw.rank() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (b, ci, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (co, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        let too_small = || {
            TensorError::invalid(
                "conv2d",
                format!("input {h}x{wd} with padding {pad} smaller than kernel {kh}x{kw}"),
            )
        };
        let out_h = ConvGeom::out_extent(h, kh, stride, pad).ok_or_else(too_small)?;
        let out_w = ConvGeom::out_extent(wd, kw, stride, pad).ok_or_else(too_small)?;
        let geom = ConvGeom {
            batch: b,
            in_c: ci,
            h,
            w: wd,
            out_c: co,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let data = kernels::conv2d_forward(tx.data(), tw.data(), &geom);
        let t = Tensor::from_parts(vec![b, co, out_h, out_w], data);
        self.push(Op::Conv2d { x: x.0, w: w.0, geom }, t)
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = &self.values[x.0];
        let s = tx.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::invalid("avg_pool2", format!("needs NCHW with even H, W; got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], h / 2, w / 2];
        let t = Tensor::from_parts(shape, kernels::avg_pool2(tx.data(), planes, h, w));
        self.push(Op::AvgPool2(x.0), t)
    }

    /// Nearest-neighbour resize of NCHW input: `src = floor(dst·H/H')`.
    pub fn resize_nearest(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let tx = &self.values[x.0];
        let s = tx.shape();
        if s.len() != 4 || target.0 == 0 || target.1 == 0 {
            return Err(TensorError::invalid("resize_nearest", format!("input {s:?}, target {target:?}")));
        }
        if (s[2], s[3]) == target {
            let t = tx.clone();
            return self.push(Op::Resize(x.0), t);
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let data = kernels::resize_nearest(tx.data(), planes, h, w, target.0, target.1);
        let t = Tensor::from_parts(vec![s[0], s[1], target.0, target.1], data);
        self.push(Op::Resize(x.0), t)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.values[parts[0].0].shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        for p in &parts[1..] {
            let s = self.values[p.0].shape();
            let ok = s.len() == first.len() && (0..s.len()).all(|d| d == axis || s[d] == first[d]);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| self.values[p.0].shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.values[p.0];
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let t = Tensor::from_parts(shape, data);
        self.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            t,
        )
    }

    /// Batch mean of `-log softmax(logits)[label]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.values[logits.0];
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(TensorError::invalid(
                "cross_entropy",
                format!("logits {:?} vs {} labels", t.shape(), labels.len()),
            ));
        }
        let (b, k) = (t.shape()[0], t.shape()[1]);
        if let Some(i) = labels.iter().position(|&l| l >= k) {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                index: i,
                value: labels[i] as f64,
            });
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut total = T::zero();
        for (row, &label) in t.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total = total + (lse - row[label]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::from_usize(b).expect("batch");
        self.push(
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Reverse sweep from a scalar `loss`, visiting each tape entry once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.is_recording() {
            return Err(TensorError::invalid("backward", "graph is in inference mode"));
        }
        let lt = &self.values[loss.0];
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        if self.requires_grad[loss.0] {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut visited = 0;
        for entry in self.tape.iter().rev() {
            visited += 1;
            let Some(g) = grads[entry.out].take() else {
                continue;
            };
            self.backprop(entry, &g, &mut grads);
            grads[entry.out] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.values[i].shape().to_vec(), g)))
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
            params: self.params.clone(),
            visited,
        })
    }

    fn backprop(&self, entry: &Entry<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| self.values[i].data();
        let out = self.values[entry.out].data();
        let mut acc = |i: usize, contrib: &mut dyn FnMut(&mut [T])| {
            if !self.requires_grad[i] {
                return;
            }
            let buf = grads[i].get_or_insert_with(|| vec![T::zero(); self.values[i].len()]);
            contrib(buf);
        };
        match &entry.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(entry.op, Op::Sub(..)) { -T::one() } else { T::one() };
                acc(*a, &mut |buf| accumulate_broadcast(buf, g, |gi, _| gi));
                acc(*b, &mut |buf| accumulate_broadcast(buf, g, |gi, _| sign * gi));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |buf| accumulate_broadcast(buf, g, |gi, i| gi * pick(vb, i)));
                acc(*b, &mut |buf| accumulate_broadcast(buf, g, |gi, i| gi * pick(va, i)));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |buf| accumulate_broadcast(buf, g, |gi, i| gi / pick(vb, i)));
                acc(*b, &mut |buf| {
                    accumulate_broadcast(buf, g, |gi, i| {
                        let d = pick(vb, i);
                        -gi * pick(va, i) / (d * d)
                    })
                });
            }
            Op::Neg(a) => acc(*a, &mut |buf| zip_add(buf, g, |gi, _| -gi)),
            Op::Exp(a) => acc(*a, &mut |buf| zip_add(buf, g, |gi, i| gi * out[i])),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |buf| zip_add(buf, g, |gi, i| gi / va[i]));
            }
            Op::Square(a) => {
                let va = val(*a);
                let two = T::from_f64_lossy(2.0);
                acc(*a, &mut |buf| zip_add(buf, g, |gi, i| two * va[i] * gi));
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| zip_add(buf, g, |gi, _| gi * *c)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |buf| zip_add(buf, g, |gi, _| gi)),
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |buf| {
                    zip_add(buf, g, |gi, i| if va[i] > T::zero() { gi } else { T::zero() })
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |buf| {
                zip_add(buf, g, |gi, i| gi * out[i] * (T::one() - out[i]))
            }),
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                acc(*x, &mut |buf| {
                    zip_add(buf, g, |gi, i| {
                        if vx[i] < *lo || vx[i] > *hi {
                            T::zero()
                        } else {
                            gi
                        }
                    })
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.values[*a].shape(), self.values[*b].shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), g, m, k, n);
                acc(*a, &mut |buf| zip_add(buf, &da, |v, _| v));
                acc(*b, &mut |buf| zip_add(buf, &db, |v, _| v));
            }
            Op::Transpose(a) => {
                let s = self.values[*a].shape();
                let gt = kernels::transpose(g, s[1], s[0]);
                acc(*a, &mut |buf| zip_add(buf, &gt, |v, _| v));
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let shape = self.values[*x].shape();
                let (_, map) = kernels::reduction_map(shape, axes);
                let scale = if matches!(entry.op, Op::Mean { .. }) {
                    let count: usize = axes.iter().map(|&ax| shape[ax]).product();
                    T::one() / T::from_usize(count).expect("count")
                } else {
                    T::one()
                };
                acc(*x, &mut |buf| {
                    for (b, &o) in buf.iter_mut().zip(&map) {
                        *b = *b + g[o] * scale;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                let s = self.values[*x].shape();
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                acc(*x, &mut |buf| zip_add(buf, g, |gi, _| gi));
                acc(*bias, &mut |buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        let ch = (i / inner) % c;
                        buf[ch] = buf[ch] + gi;
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    self.requires_grad[*x],
                    self.requires_grad[*w],
                );
                if let Some(dx) = dx {
                    acc(*x, &mut |buf| zip_add(buf, &dx, |v, _| v));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |buf| zip_add(buf, &dw, |v, _| v));
                }
            }
            Op::AvgPool2(x) => {
                let s = self.values[*x].shape();
                let dx = kernels::avg_pool2_backward(g, s[0] * s[1], s[2], s[3]);
                acc(*x, &mut |buf| zip_add(buf, &dx, |v, _| v));
            }
            Op::Resize(x) => {
                let s = self.values[*x].shape();
                let os = self.values[entry.out].shape();
                let dx = if s == os {
                    g.to_vec()
                } else {
                    kernels::resize_nearest_backward(g, s[0] * s[1], s[2], s[3], os[2], os[3])
                };
                acc(*x, &mut |buf| zip_add(buf, &dx, |v, _| v));
            }
            Op::Concat { parts, axis } => {
                let os = self.values[entry.out].shape();
                let outer: usize = os[..*axis].iter().product();
                let inner: usize = os[axis + 1..].iter().product();
                let total = os[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.values[p].shape()[*axis] * inner;
                    acc(p, &mut |buf| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (b, &v) in buf[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *b = *b + v;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.values[*logits].shape()[1];
                let scale = g[0] / T::from_usize(labels.len()).expect("batch");
                acc(*logits, &mut |buf| {
                    for (i, (b, &p)) in buf.iter_mut().zip(probs).enumerate() {
                        let onehot = if labels[i / k] == i % k { T::one() } else { T::zero() };
                        *b = *b + (p - onehot) * scale;
                    }
                });
            }
        }
    }
}

fn pick<T: Copy>(v: &[T], i: usize) -> T {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn zip_add<T: Element>(buf: &mut [T], g: &[T], f: impl Fn(T, usize) -> T) {
    for (i, (b, &gi)) in buf.iter_mut().zip(g).enumerate() {
        *b = *b + f(gi, i);
    }
}

/// Accumulates an elementwise contribution into `buf`, summing everything
/// when `buf` belongs to a broadcast rank-0 operand.
fn accumulate_broadcast<T: Element>(buf: &mut [T], g: &[T], f: impl Fn(T, usize) -> T) {
    if buf.len() == 1 && g.len() != 1 {
        let s: T = g.iter().enumerate().map(|(i, &gi)| f(gi, i)).sum();
        buf[0] = buf[0] + s;
    } else {
        zip_add(buf, g, f);
    }
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<usize, usize>,
    visited: usize,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to any value; zeros when it does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient of registered parameter `id`, or `None` if it was never registered.
    pub fn param(&self, id: usize) -> Option<Tensor<T>> {
        self.params.get(&id).map(|&v| self.wrt(Var(v)))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }

    /// Tape entries processed by the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

pub(crate) fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
