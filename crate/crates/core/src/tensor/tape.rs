//! The differentiation tape and its operations.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::kernels::{gemm, ConvGeom, PoolPlan};
use super::{broadcast_shape, broadcast_strides, split_axis, Result, Tensor, TensorError, EPS_NORM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Neg,
    /// Leaky rectifier with the given negative slope.
    LeakyRelu(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// `sqrt(sum(x²) + EPS_NORM)`.
    L2Norm,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary { x: usize, kind: UnaryKind },
    Binary { a: usize, b: usize, kind: BinaryKind },
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Conv2d { x: usize, kernel: usize },
    LpPool { x: usize, p: f64, window: Vec<usize>, stride: Vec<usize> },
    Softmax { x: usize, axis: usize },
    Reduce { x: usize, kind: ReduceKind, axis: Option<usize> },
    Gather { table: usize, ids: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    UpsampleRows { x: usize, factor: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<usize>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// A tape is single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value())
            .finish()
    }
}

/// Result of a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf, or `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    /// Gradients keyed by parameter index, summed over repeated registrations.
    pub fn params(&self) -> &BTreeMap<usize, Tensor> {
        &self.params
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input or constant.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, None)
    }

    /// Records parameter `index` of a parameter store.
    pub fn param(&self, index: usize, value: &Tensor) -> Var<'_> {
        self.push_node(value.clone(), Op::Leaf, Some(index))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let values: Vec<Tensor> = parts
            .iter()
            .map(|p| self.check_same(*p).map(|_| p.value()))
            .collect::<Result<_>>()?;
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Contract(format!("concat axis {axis} for shape {base:?}")));
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push_node(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            None,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// Every recorded operation up to the loss is visited exactly once, in
    /// reverse order. The tape is consumed: later calls fail.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_same(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::Contract("tape already consumed by backward".into()));
        }
        let nodes = &inner.nodes;
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                if let Some(p) = node.param {
                    match out.params.get_mut(&p) {
                        Some(acc) => {
                            let sum = acc.data().iter().zip(t.data()).map(|(a, b)| a + b).collect();
                            *acc = Tensor::from_parts(t.shape().to_vec(), sum);
                        }
                        None => {
                            out.params.insert(p, t.clone());
                        }
                    }
                }
                out.leaves.insert(id, t);
                continue;
            }
            backprop(&node.op, &node.value, &g, nodes, &mut grads);
        }
        inner.consumed = true;
        Ok(out)
    }

    fn push_node(&self, value: Tensor, op: Op, param: Option<usize>) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { value, op, param });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn check_same(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, v.tape) {
            return Err(TensorError::Contract("variable belongs to a different tape".into()));
        }
        if self.inner.borrow().consumed {
            return Err(TensorError::Contract("tape already consumed by backward".into()));
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    fn emit(&self, value: Tensor, op: Op) -> Result<Var<'t>> {
        self.tape.check_same(*self)?;
        Ok(self.tape.push_node(value, op, None))
    }

    pub fn unary(&self, kind: UnaryKind) -> Result<Var<'t>> {
        let x = self.value();
        if kind == UnaryKind::Log {
            if let Some(index) = x.data().iter().position(|&v| v <= 0.0 || v.is_nan()) {
                return Err(TensorError::Domain { op: "log", index });
            }
        }
        let f: fn(f64, UnaryKind) -> f64 = |v, kind| match kind {
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Neg => -v,
            UnaryKind::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            UnaryKind::Scale(c) => c * v,
            UnaryKind::AddScalar(c) => v + c,
        };
        let y = x.map(|v| f(v, kind));
        self.emit(y, Op::Unary { x: self.id, kind })
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Log)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::AddScalar(c))
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Result<Var<'t>> {
        self.neg()?.add_scalar(1.0)
    }

    /// Elementwise binary operation with singleton broadcasting.
    pub fn binary(&self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.tape.check_same(other)?;
        let (a, b) = (self.value(), other.value());
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let shape = broadcast_shape(op_name, a.shape(), b.shape())?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(a.shape(), &shape);
            let sb = broadcast_strides(b.shape(), &shape);
            let mut data = vec![0.0; shape.iter().product()];
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| data[o] = f(a.data()[ia], b.data()[ib]));
            data
        };
        self.emit(
            Tensor::from_parts(shape, data),
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
            },
        )
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Matrix product of an `I×K` and a `K×J` matrix.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        self.emit(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(TensorError::Contract(format!("transpose needs a matrix, got {:?}", x.shape())));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        self.emit(Tensor::from_parts(vec![c, r], data), Op::Transpose { x: self.id })
    }

    /// Same-padded, stride-1 convolution of a `T×F×Cin` map with a
    /// `kh×kw×Cin×Cout` kernel (odd widths). No bias.
    pub fn conv2d(&self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same(kernel)?;
        let (x, k) = (self.value(), kernel.value());
        let geom = conv_geom(x.shape(), k.shape())?;
        let cout = k.shape()[3];
        let cols = geom.im2col(x.data());
        let rows = geom.t * geom.f;
        let mut out = vec![0.0; rows * cout];
        gemm(rows, geom.patch(), cout, &cols, false, k.data(), false, &mut out, false);
        self.emit(
            Tensor::from_parts(vec![geom.t, geom.f, cout], out),
            Op::Conv2d {
                x: self.id,
                kernel: kernel.id,
            },
        )
    }

    /// Same-padded convolution along the rows of an `L×Cin` matrix with a
    /// `k×Cin×Cout` kernel (odd `k`). No bias.
    pub fn conv1d(&self, kernel: Var<'t>) -> Result<Var<'t>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if ks.len() == 3 && ks[0] % 2 == 0 {
            return Err(TensorError::Config(format!("conv1d kernel width {} must be odd", ks[0])));
        }
        if xs.len() != 2 || ks.len() != 3 || xs[1] != ks[1] {
            return Err(TensorError::Shape {
                op: "conv1d",
                lhs: xs,
                rhs: ks,
            });
        }
        let x3 = self.reshape(vec![xs[0], 1, xs[1]])?;
        let k4 = kernel.reshape(vec![ks[0], 1, ks[1], ks[2]])?;
        x3.conv2d(k4)?.reshape(vec![xs[0], ks[2]])
    }

    /// Lp pooling: every output cell is `(mean |x|^p over its window)^(1/p)`.
    ///
    /// `window` and `stride` cover the leading axes; missing trailing axes use
    /// window and stride 1.
    pub fn lp_pool(&self, p: f64, window: &[usize], stride: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        if !(p >= 1.0) {
            return Err(TensorError::Config(format!("lp_pool needs p >= 1, got {p}")));
        }
        if window.len() > rank || stride.len() != window.len() || stride.contains(&0) || window.contains(&0) {
            return Err(TensorError::Config(format!(
                "lp_pool window {window:?} / stride {stride:?} invalid for shape {:?}",
                x.shape()
            )));
        }
        let mut w = window.to_vec();
        let mut s = stride.to_vec();
        w.resize(rank, 1);
        s.resize(rank, 1);
        if w.iter().zip(x.shape()).any(|(w, n)| w > n) {
            return Err(TensorError::Shape {
                op: "lp_pool",
                lhs: x.shape().to_vec(),
                rhs: w,
            });
        }
        let plan = PoolPlan::new(x.shape(), &w, &s);
        let n = plan.window_offsets.len() as f64;
        let out: Vec<f64> = plan
            .origins
            .iter()
            .map(|&o| {
                let mean = plan
                    .window_offsets
                    .iter()
                    .map(|&k| x.data()[o + k].abs().powf(p))
                    .sum::<f64>()
                    / n;
                mean.powf(1.0 / p)
            })
            .collect();
        self.emit(
            Tensor::from_parts(plan.out_shape, out),
            Op::LpPool {
                x: self.id,
                p,
                window: w,
                stride: s,
            },
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::Contract(format!("softmax axis {axis} for shape {:?}", x.shape())));
        }
        if let Some(index) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Numeric { op: "softmax", index });
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (x.data()[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    y[at(j)] /= sum;
                }
            }
        }
        self.emit(Tensor::from_parts(x.shape().to_vec(), y), Op::Softmax { x: self.id, axis })
    }

    /// Reduces along `axis` (removing it), or over everything when `axis` is `None`.
    pub fn reduce(&self, kind: ReduceKind, axis: Option<usize>) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, n, inner, shape) = match axis {
            Some(a) if a >= x.rank() => {
                return Err(TensorError::Contract(format!("reduce axis {a} for shape {:?}", x.shape())))
            }
            Some(a) => {
                let (o, n, i) = split_axis(x.shape(), a);
                let mut shape = x.shape().to_vec();
                shape.remove(a);
                (o, n, i, shape)
            }
            None => (1, x.numel(), 1, Vec::new()),
        };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let vals = (0..n).map(|j| x.data()[o * n * inner + j * inner + i]);
                out[o * inner + i] = match kind {
                    ReduceKind::Sum => vals.sum(),
                    ReduceKind::Mean => vals.sum::<f64>() / n as f64,
                    ReduceKind::L2Norm => (vals.map(|v| v * v).sum::<f64>() + EPS_NORM).sqrt(),
                };
            }
        }
        self.emit(Tensor::from_parts(shape, out), Op::Reduce { x: self.id, kind, axis })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, None)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, None)
    }

    /// Row gather from a `V×d` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.rank() != 2 {
            return Err(TensorError::Contract(format!("gather needs a matrix, got {:?}", table.shape())));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Contract(format!("row id {bad} out of range for table of {v} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(table.row(i));
        }
        self.emit(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || start > end || end > x.shape()[axis] {
            return Err(TensorError::Contract(format!(
                "slice [{start}, {end}) on axis {axis} of {:?}",
                x.shape()
            )));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.emit(Tensor::from_parts(shape, data), Op::Slice { x: self.id, axis, start })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let y = self.value().reshaped(shape)?;
        self.emit(y, Op::Reshape { x: self.id })
    }

    /// Nearest-neighbour row repetition: output row `t` copies input row
    /// `min(t / factor, rows - 1)`, for `out_len` rows.
    pub fn upsample_rows(&self, factor: usize, out_len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] == 0 || factor == 0 {
            return Err(TensorError::Contract(format!(
                "upsample_rows x{factor} on {:?}",
                x.shape()
            )));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(out_len * cols);
        for t in 0..out_len {
            data.extend_from_slice(x.row((t / factor).min(rows - 1)));
        }
        self.emit(
            Tensor::from_parts(vec![out_len, cols], data),
            Op::UpsampleRows { x: self.id, factor },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        let y = self.value().map(|v| v.clamp(lo, hi));
        self.emit(y, Op::Clamp { x: self.id, lo, hi })
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv_geom(x: &[usize], k: &[usize]) -> Result<ConvGeom> {
    if x.len() != 3 || k.len() != 4 || x[2] != k[2] {
        return Err(TensorError::Shape {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: k.to_vec(),
        });
    }
    if k[0].is_multiple_of(2) || k[1].is_multiple_of(2) {
        return Err(TensorError::Config(format!(
            "conv2d kernel {}x{} must have odd widths",
            k[0], k[1]
        )));
    }
    Ok(ConvGeom {
        t: x[0],
        f: x[1],
        c: x[2],
        kh: k[0],
        kw: k[1],
    })
}

fn for_each_broadcast(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            ia -= sa[ax] * shape[ax];
            ib -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, n: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; n])
}

fn backprop(op: &Op, out: &Tensor, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    match *op {
        Op::Leaf => {}
        Op::Unary { x, kind } => {
            let xv = val(x);
            let y = out.data();
            let gx = slot(grads, x, xv.numel());
            for (i, gi) in gx.iter_mut().enumerate() {
                let d = match kind {
                    UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                    UnaryKind::Tanh => 1.0 - y[i] * y[i],
                    UnaryKind::Exp => y[i],
                    UnaryKind::Log => 1.0 / xv.data()[i],
                    UnaryKind::Neg => -1.0,
                    UnaryKind::LeakyRelu(s) => {
                        if xv.data()[i] > 0.0 {
                            1.0
                        } else {
                            s
                        }
                    }
                    UnaryKind::Scale(c) => c,
                    UnaryKind::AddScalar(_) => 1.0,
                };
                *gi += g[i] * d;
            }
        }
        Op::Binary { a, b, kind } => {
            let (av, bv) = (val(a).clone(), val(b).clone());
            let shape = out.shape();
            let sa = broadcast_strides(av.shape(), shape);
            let sb = broadcast_strides(bv.shape(), shape);
            let mut ga = vec![0.0; av.numel()];
            let mut gb = vec![0.0; bv.numel()];
            for_each_broadcast(shape, &sa, &sb, |o, ia, ib| match kind {
                BinaryKind::Add => {
                    ga[ia] += g[o];
                    gb[ib] += g[o];
                }
                BinaryKind::Sub => {
                    ga[ia] += g[o];
                    gb[ib] -= g[o];
                }
                BinaryKind::Mul => {
                    ga[ia] += g[o] * bv.data()[ib];
                    gb[ib] += g[o] * av.data()[ia];
                }
            });
            add_into(slot(grads, a, ga.len()), &ga);
            add_into(slot(grads, b, gb.len()), &gb);
        }
        Op::MatMul { a, b } => {
            let (av, bv) = (val(a).clone(), val(b).clone());
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            gemm(m, n, k, g, false, bv.data(), true, slot(grads, a, m * k), true);
            gemm(k, m, n, av.data(), true, g, false, slot(grads, b, k * n), true);
        }
        Op::Transpose { x } => {
            let (r, c) = (val(x).shape()[0], val(x).shape()[1]);
            let gx = slot(grads, x, r * c);
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::Conv2d { x, kernel } => {
            let (xv, kv) = (val(x).clone(), val(kernel).clone());
            let geom = conv_geom(xv.shape(), kv.shape()).expect("validated in forward");
            let cout = kv.shape()[3];
            let rows = geom.t * geom.f;
            let cols = geom.im2col(xv.data());
            gemm(geom.patch(), rows, cout, &cols, true, g, false, slot(grads, kernel, kv.numel()), true);
            let mut gcols = cols;
            gemm(rows, cout, geom.patch(), g, false, kv.data(), true, &mut gcols, false);
            geom.col2im(&gcols, slot(grads, x, xv.numel()));
        }
        Op::LpPool {
            x,
            p,
            ref window,
            ref stride,
        } => {
            let xv = val(x).clone();
            let plan = PoolPlan::new(xv.shape(), window, stride);
            let n = plan.window_offsets.len() as f64;
            let gx = slot(grads, x, xv.numel());
            for (o, &origin) in plan.origins.iter().enumerate() {
                let y = out.data()[o];
                if y <= 0.0 {
                    continue;
                }
                let coef = g[o] * y.powf(1.0 - p) / n;
                for &k in &plan.window_offsets {
                    let v = xv.data()[origin + k];
                    gx[origin + k] += coef * v.abs().powf(p - 1.0) * v.signum();
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = out.data();
            let (outer, n, inner) = split_axis(out.shape(), axis);
            let gx = slot(grads, x, y.len());
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
        }
        Op::Reduce { x, kind, axis } => {
            let xv = val(x).clone();
            let (outer, n, inner) = match axis {
                Some(a) => split_axis(xv.shape(), a),
                None => (1, xv.numel(), 1),
            };
            let gx = slot(grads, x, xv.numel());
            for o in 0..outer {
                for i in 0..inner {
                    let go = g[o * inner + i];
                    let y = out.data()[o * inner + i];
                    for j in 0..n {
                        let at = o * n * inner + j * inner + i;
                        gx[at] += match kind {
                            ReduceKind::Sum => go,
                            ReduceKind::Mean => go / n as f64,
                            ReduceKind::L2Norm => go * xv.data()[at] / y,
                        };
                    }
                }
            }
        }
        Op::Gather { table, ref ids } => {
            let tv = val(table);
            let d = tv.shape()[1];
            let gt = slot(grads, table, tv.numel());
            for (r, &i) in ids.iter().enumerate() {
                add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
            }
        }
        Op::Concat { ref parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), axis);
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let n = pv.shape()[axis];
                let gp = slot(grads, p, pv.numel());
                for o in 0..outer {
                    let src = o * total * inner + offset * inner;
                    add_into(&mut gp[o * n * inner..(o + 1) * n * inner], &g[src..src + n * inner]);
                }
                offset += n;
            }
        }
        Op::Slice { x, axis, start } => {
            let xv = val(x);
            let (outer, n, inner) = split_axis(xv.shape(), axis);
            let len = out.shape()[axis];
            let gx = slot(grads, x, xv.numel());
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                add_into(&mut gx[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Op::Reshape { x } => {
            add_into(slot(grads, x, g.len()), g);
        }
        Op::UpsampleRows { x, factor } => {
            let xv = val(x);
            let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
            let gx = slot(grads, x, xv.numel());
            for t in 0..out.shape()[0] {
                let r = (t / factor).min(rows - 1);
                add_into(&mut gx[r * cols..(r + 1) * cols], &g[t * cols..(t + 1) * cols]);
            }
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(x);
            let gx = slot(grads, x, xv.numel());
            for (i, gi) in gx.iter_mut().enumerate() {
                let v = xv.data()[i];
                if v > lo && v < hi {
                    *gi += g[i];
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
