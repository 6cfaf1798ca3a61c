use std::cell::{Ref, RefCell};
use std::fmt;

use super::tensor::{axis_split, broadcast_index_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// A dynamic computation graph. Nodes are appended in evaluation order, so
/// node ids are already a topological order.
///
/// `backward` recomputes every gradient from scratch, so calling it twice
/// on the same root yields the same gradients (idempotent, not accumulating).
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Sum { x: usize, axis: Option<usize> },
    Mean { x: usize, axis: Option<usize> },
    MatMul(usize, usize),
    Softmax { x: usize, axis: usize },
    LogSumExp { x: usize, axis: usize },
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Conv1d { x: usize, w: usize, dilation: usize },
    Element { x: usize, index: usize },
    Reshape { x: usize },
    SoftMin { xs: Vec<usize>, gamma: f64 },
    SoftMax { xs: Vec<usize>, gamma: f64 },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Value<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Value#{}({:?})", self.id, *self.data())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf (a parameter or input we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Value<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Value<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Value<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Value {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn op_node(&self, value: Tensor, op: Op, parents: &[usize]) -> Value<'_> {
        let rg = self.needs(parents);
        self.push(value, op, rg)
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v`
    /// was reached.
    pub fn grad(&self, v: Value<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).and_then(Clone::clone)
    }

    /// Reverse-mode sweep from a single-element `root`. Every reachable node
    /// is visited exactly once, in reverse id order.
    pub fn backward(&self, root: Value<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn grad_buffer<'a>(grads: &'a mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'a mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_index_map(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    let buf = out.data_mut();
    for (gi, &si) in g.data().iter().zip(&map) {
        buf[si] += gi;
    }
    out
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if wants(*a) {
                accumulate(grads, *a, reduce_to(g, val(*a).shape()));
            }
            if wants(*b) {
                let gb = reduce_to(g, val(*b).shape());
                accumulate(grads, *b, if sign < 0.0 { gb.map(|x| -x) } else { gb });
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if wants(*a) {
                let prod = binary_map(g, tb, |x, y| x * y);
                accumulate(grads, *a, reduce_to(&prod, ta.shape()));
            }
            if wants(*b) {
                let prod = binary_map(g, ta, |x, y| x * y);
                accumulate(grads, *b, reduce_to(&prod, tb.shape()));
            }
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if wants(*a) {
                let q = binary_map(g, tb, |x, y| x / y);
                accumulate(grads, *a, reduce_to(&q, ta.shape()));
            }
            if wants(*b) {
                // d(a/b)/db = -out / b
                let q = binary_map(&binary_map(g, out, |x, y| x * y), tb, |x, y| -x / y);
                accumulate(grads, *b, reduce_to(&q, tb.shape()));
            }
        }
        Op::Neg(x) => accumulate(grads, *x, g.map(|v| -v)),
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(grads, *x, g.map(|v| v * c));
        }
        Op::Shift(x) => accumulate(grads, *x, g.clone()),
        Op::Exp(x) => accumulate(grads, *x, zip_map(g, out, |gi, y| gi * y)),
        Op::Log(x) => accumulate(grads, *x, zip_map(g, val(*x), |gi, xv| gi / xv)),
        Op::Tanh(x) => accumulate(grads, *x, zip_map(g, out, |gi, y| gi * (1.0 - y * y))),
        Op::Sigmoid(x) => accumulate(grads, *x, zip_map(g, out, |gi, y| gi * y * (1.0 - y))),
        Op::Softplus(x) => accumulate(grads, *x, zip_map(g, val(*x), |gi, xv| gi * sigmoid(xv))),
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            accumulate(
                grads,
                *x,
                zip_map(g, val(*x), |gi, xv| if xv < lo || xv > hi { 0.0 } else { gi }),
            );
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let shape = val(*x).shape();
            let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                let n = match axis {
                    Some(a) => shape[*a],
                    None => shape.iter().product(),
                };
                1.0 / n as f64
            } else {
                1.0
            };
            let mut gx = Tensor::zeros(shape);
            match axis {
                None => {
                    let v = g.item() * scale;
                    gx.data_mut().iter_mut().for_each(|e| *e = v);
                }
                Some(a) => {
                    let (outer, n, inner) = axis_split(shape, *a);
                    let buf = gx.data_mut();
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                buf[(o * n + k) * inner + i] = g.data()[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if wants(*a) {
                // dA = G B^T
                let mut ga = Tensor::zeros(&[m, k]);
                let (gd, bd) = (g.data(), tb.data());
                let buf = ga.data_mut();
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        buf[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                accumulate(grads, *a, ga);
            }
            if wants(*b) {
                // dB = A^T G
                let mut gb = Tensor::zeros(&[k, n]);
                let (gd, ad) = (g.data(), ta.data());
                let buf = gb.data_mut();
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &mut buf[p * n..(p + 1) * n];
                        for (o, gv) in brow.iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let mut gx = Tensor::zeros(out.shape());
            let (y, gd) = (out.data(), g.data());
            let buf = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: f64 = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        buf[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::LogSumExp { x, axis } => {
            let xs = val(*x);
            let (outer, n, inner) = axis_split(xs.shape(), *axis);
            let mut gx = Tensor::zeros(xs.shape());
            let buf = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let lse = out.data()[o * inner + i];
                    let gv = g.data()[o * inner + i];
                    for k in 0..n {
                        let at = (o * n + k) * inner + i;
                        buf[at] = gv * (xs.data()[at] - lse).exp();
                    }
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::Concat { xs, axis } => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &p in xs {
                let shape = val(p).shape();
                let len = shape[*axis];
                if wants(p) {
                    let mut gp = Tensor::zeros(shape);
                    let buf = gp.data_mut();
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        buf[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    accumulate(grads, p, gp);
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let shape = val(*x).shape().to_vec();
            let (outer, n, inner) = axis_split(&shape, *axis);
            let len = out.shape()[*axis];
            let buf = grad_buffer(grads, *x, &shape).data_mut();
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                for (d, s) in buf[dst..dst + len * inner]
                    .iter_mut()
                    .zip(&g.data()[src..src + len * inner])
                {
                    *d += s;
                }
            }
        }
        Op::Conv1d { x, w, dilation } => {
            let (tx, tw) = (val(*x), val(*w));
            let (t_len, cin) = (tx.rows(), tx.cols());
            let (k_len, cout) = (tw.shape()[0], tw.shape()[2]);
            let half = (k_len - 1) / 2;
            let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
            if wants(*x) {
                let mut gx = Tensor::zeros(tx.shape());
                let buf = gx.data_mut();
                for k in 0..k_len {
                    let off = (k as isize - half as isize) * *dilation as isize;
                    for t in conv_range(t_len, off) {
                        let src = (t as isize + off) as usize;
                        let grow = &gd[t * cout..(t + 1) * cout];
                        for i in 0..cin {
                            let wrow = &wd[(k * cin + i) * cout..(k * cin + i + 1) * cout];
                            buf[src * cin + i] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            if wants(*w) {
                let mut gw = Tensor::zeros(tw.shape());
                let buf = gw.data_mut();
                for k in 0..k_len {
                    let off = (k as isize - half as isize) * *dilation as isize;
                    for t in conv_range(t_len, off) {
                        let src = (t as isize + off) as usize;
                        let grow = &gd[t * cout..(t + 1) * cout];
                        for i in 0..cin {
                            let xv = xd[src * cin + i];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &mut buf[(k * cin + i) * cout..(k * cin + i + 1) * cout];
                            for (o, gv) in wrow.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                }
                accumulate(grads, *w, gw);
            }
        }
        Op::Reshape { x } => {
            let g = g.clone().reshape(val(*x).shape().to_vec()).expect("same element count");
            accumulate(grads, *x, g);
        }
        Op::Element { x, index } => {
            let shape = val(*x).shape().to_vec();
            grad_buffer(grads, *x, &shape).data_mut()[*index] += g.item();
        }
        Op::SoftMin { xs, gamma } | Op::SoftMax { xs, gamma } => {
            let sign = if matches!(nodes[id].op, Op::SoftMin { .. }) { -1.0 } else { 1.0 };
            let o = out.item();
            for &p in xs {
                if wants(p) {
                    let w = (sign * (val(p).item() - o) / gamma).exp();
                    accumulate(grads, p, Tensor::scalar(g.item() * w));
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Output frames `t` for which input frame `t + off` exists.
fn conv_range(t_len: usize, off: isize) -> std::ops::Range<usize> {
    let lo = (-off).max(0) as usize;
    let hi = (t_len as isize - off.max(0)).max(0) as usize;
    lo.min(hi)..hi
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Broadcasting elementwise map; `a` must already have the output shape
/// or be broadcastable with `b`.
fn binary_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return zip_map(a, b, f);
    }
    let shape = broadcast_shape("broadcast", a.shape(), b.shape()).expect("checked at forward");
    let ma = broadcast_index_map(a.shape(), &shape);
    let mb = broadcast_index_map(b.shape(), &shape);
    let data = ma
        .iter()
        .zip(&mb)
        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
        .collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

fn reduce_axis(x: &Tensor, axis: usize, f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    let mut data = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut it = (0..n).map(|k| x.data()[(o * n + k) * inner + i]);
            data.push(f(&mut it));
        }
    }
    Tensor::new(shape, data).expect("reduced shape")
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!("{op}: axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn stable_lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Soft minimum `-gamma * ln(sum(exp(-v / gamma)))`, evaluated as
/// `min(v) - gamma * ln(sum(exp(-(v - min(v)) / gamma)))`.
pub fn softmin(values: &[f64], gamma: f64) -> f64 {
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return -gamma * stable_lse(values.iter().map(|v| -v / gamma));
    }
    let s: f64 = values.iter().map(|v| (-(v - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}

/// Soft maximum `gamma * ln(sum(exp(v / gamma)))`, i.e. `-softmin(-v)`.
pub fn softmax_scalar(values: &[f64], gamma: f64) -> f64 {
    let neg: Vec<f64> = values.iter().map(|v| -v).collect();
    -softmin(&neg, gamma)
}

impl<'t> Value<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn data(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.data().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.data().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Value<'t> {
        let out = self.data().map(f);
        self.tape.op_node(out, op, &[self.id])
    }

    fn binary(self, other: Value<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Value<'t>> {
        let out = {
            let (a, b) = (self.data(), other.data());
            broadcast_shape(name, a.shape(), b.shape())?;
            binary_map(&a, &b, f)
        };
        Ok(self.tape.op_node(out, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Value<'t>) -> Result<Value<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Value<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Value<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Value<'t> {
        self.unary(Op::Shift(self.id), |x| x + c)
    }

    pub fn exp(self) -> Value<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; every element must be strictly positive.
    pub fn ln(self) -> Result<Value<'t>> {
        if let Some(bad) = self.data().data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn tanh(self) -> Value<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Value<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Value<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    /// Clamp into `[lo, hi]`. The gradient passes through inside the range
    /// and on its boundary, and is zero strictly outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Value<'t> {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Elementwise `max(x, c)`.
    pub fn max_scalar(self, c: f64) -> Value<'t> {
        self.clamp(c, f64::INFINITY)
    }

    pub fn sum(self) -> Value<'t> {
        let out = Tensor::scalar(self.data().data().iter().sum());
        self.tape.op_node(out, Op::Sum { x: self.id, axis: None }, &[self.id])
    }

    pub fn mean(self) -> Value<'t> {
        let out = {
            let d = self.data();
            Tensor::scalar(d.data().iter().sum::<f64>() / d.len() as f64)
        };
        self.tape.op_node(out, Op::Mean { x: self.id, axis: None }, &[self.id])
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Value<'t>> {
        let out = {
            let d = self.data();
            check_axis("sum", d.shape(), axis)?;
            reduce_axis(&d, axis, |it| it.sum())
        };
        Ok(self.tape.op_node(out, Op::Sum { x: self.id, axis: Some(axis) }, &[self.id]))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Value<'t>> {
        let out = {
            let d = self.data();
            check_axis("mean", d.shape(), axis)?;
            let n = d.shape()[axis] as f64;
            reduce_axis(&d, axis, |it| it.sum::<f64>() / n)
        };
        Ok(self.tape.op_node(out, Op::Mean { x: self.id, axis: Some(axis) }, &[self.id]))
    }

    pub fn matmul(self, other: Value<'t>) -> Result<Value<'t>> {
        let out = {
            let (a, b) = (self.data(), other.data());
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut out = Tensor::zeros(&[m, n]);
            let (ad, bd) = (a.data(), b.data());
            let buf = out.data_mut();
            for i in 0..m {
                let orow = &mut buf[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += av * bv;
                    }
                }
            }
            out
        };
        Ok(self.tape.op_node(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn softmax(self, axis: usize) -> Result<Value<'t>> {
        let out = {
            let d = self.data();
            check_axis("softmax", d.shape(), axis)?;
            let (outer, n, inner) = axis_split(d.shape(), axis);
            let mut out = Tensor::zeros(d.shape());
            let buf = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| d.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..n {
                        let e = (d.data()[at(k)] - m).exp();
                        buf[at(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        buf[at(k)] /= z;
                    }
                }
            }
            out
        };
        Ok(self.tape.op_node(out, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    /// Log-sum-exp over `axis`, removing it.
    pub fn logsumexp(self, axis: usize) -> Result<Value<'t>> {
        let out = {
            let d = self.data();
            check_axis("logsumexp", d.shape(), axis)?;
            let (outer, n, inner) = axis_split(d.shape(), axis);
            let mut shape = d.shape().to_vec();
            shape.remove(axis);
            let mut data = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    data.push(stable_lse((0..n).map(|k| d.data()[(o * n + k) * inner + i])));
                }
            }
            Tensor::new(shape, data)?
        };
        Ok(self.tape.op_node(out, Op::LogSumExp { x: self.id, axis }, &[self.id]))
    }

    /// Half-open slice `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Value<'t>> {
        let out = {
            let d = self.data();
            check_axis("slice", d.shape(), axis)?;
            if start > end || end > d.shape()[axis] {
                return Err(Error::invalid(format!(
                    "slice [{start}, {end}) out of bounds for axis {axis} of {:?}",
                    d.shape()
                )));
            }
            let (outer, n, inner) = axis_split(d.shape(), axis);
            let len = end - start;
            let mut shape = d.shape().to_vec();
            shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = (o * n + start) * inner;
                data.extend_from_slice(&d.data()[src..src + len * inner]);
            }
            Tensor::new(shape, data)?
        };
        Ok(self.tape.op_node(out, Op::Slice { x: self.id, axis, start }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Value<'t>> {
        let out = self.data().clone().reshape(shape.to_vec())?;
        Ok(self.tape.op_node(out, Op::Reshape { x: self.id }, &[self.id]))
    }

    /// Scalar view of element `index` (flat, row-major).
    pub fn element(self, index: usize) -> Result<Value<'t>> {
        let v = {
            let d = self.data();
            *d.data().get(index).ok_or_else(|| {
                Error::invalid(format!("element {index} out of bounds for {:?}", d.shape()))
            })?
        };
        Ok(self.tape.op_node(Tensor::scalar(v), Op::Element { x: self.id, index }, &[self.id]))
    }
}

impl Tape {
    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Value<'t>], axis: usize) -> Result<Value<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?
            .shape();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for p in parts {
            let d = p.data();
            let len = d.shape()[axis];
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&d.data()[src..src + len * inner]);
            }
            offset += len;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.op_node(out, Op::Concat { xs: ids.clone(), axis }, &ids))
    }

    /// "Same"-padded dilated 1-D convolution over time.
    /// `x` is `[T, C_in]`, `w` is `[K, C_in, C_out]` with odd `K`.
    pub fn conv1d<'t>(&'t self, x: Value<'t>, w: Value<'t>, dilation: usize) -> Result<Value<'t>> {
        let out = {
            let (tx, tw) = (x.data(), w.data());
            if tx.rank() != 2 || tw.rank() != 3 || tw.shape()[1] != tx.cols() || tw.shape()[0] % 2 == 0 {
                return Err(Error::Shape {
                    op: "conv1d",
                    lhs: tx.shape().to_vec(),
                    rhs: tw.shape().to_vec(),
                });
            }
            if dilation == 0 {
                return Err(Error::invalid("conv1d dilation must be >= 1"));
            }
            let (t_len, cin) = (tx.rows(), tx.cols());
            let (k_len, cout) = (tw.shape()[0], tw.shape()[2]);
            let half = (k_len - 1) / 2;
            let mut out = Tensor::zeros(&[t_len, cout]);
            let (xd, wd) = (tx.data(), tw.data());
            let buf = out.data_mut();
            for k in 0..k_len {
                let off = (k as isize - half as isize) * dilation as isize;
                for t in conv_range(t_len, off) {
                    let src = (t as isize + off) as usize;
                    let orow = &mut buf[t * cout..(t + 1) * cout];
                    for i in 0..cin {
                        let xv = xd[src * cin + i];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wd[(k * cin + i) * cout..(k * cin + i + 1) * cout];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
            out
        };
        Ok(self.op_node(out, Op::Conv1d { x: x.id, w: w.id, dilation }, &[x.id, w.id]))
    }

    fn soft_reduce<'t>(&'t self, xs: &[Value<'t>], gamma: f64, min: bool) -> Result<Value<'t>> {
        if xs.is_empty() {
            return Err(Error::invalid("soft min/max of an empty set"));
        }
        if !(gamma > 0.0) {
            return Err(Error::invalid(format!("temperature must be > 0, got {gamma}")));
        }
        let vals = xs
            .iter()
            .map(|v| {
                let d = v.data();
                if d.len() != 1 {
                    return Err(Error::invalid(format!(
                        "soft min/max expects scalars, got shape {:?}",
                        d.shape()
                    )));
                }
                Ok(d.item())
            })
            .collect::<Result<Vec<f64>>>()?;
        let out = if min { softmin(&vals, gamma) } else { softmax_scalar(&vals, gamma) };
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let op = if min {
            Op::SoftMin { xs: ids.clone(), gamma }
        } else {
            Op::SoftMax { xs: ids.clone(), gamma }
        };
        Ok(self.op_node(Tensor::scalar(out), op, &ids))
    }

    /// Differentiable soft minimum of scalar values.
    pub fn soft_min<'t>(&'t self, xs: &[Value<'t>], gamma: f64) -> Result<Value<'t>> {
        self.soft_reduce(xs, gamma, true)
    }

    /// Differentiable soft maximum of scalar values.
    pub fn soft_max<'t>(&'t self, xs: &[Value<'t>], gamma: f64) -> Result<Value<'t>> {
        self.soft_reduce(xs, gamma, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_backward_from_sum() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let c = a.add(b).unwrap();
        assert_eq!(c.data().data(), &[4.0, 6.0]);
        c.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[1.0, 1.0]);
        assert_eq!(b.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn logsumexp_singleton() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let y = x.logsumexp(0).unwrap();
        assert_eq!(y.item(), 0.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        let msg = a.matmul(a).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(a.ln(), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn diamond_accumulates() {
        // y = x*x + 3x with x used by two consumers; dy/dx = 2x + 3.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let sq = x.mul(x).unwrap();
        let lin = x.scale(3.0);
        let y = sq.add(lin).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 2.0 * 1.5 + 3.0);
    }

    #[test]
    fn backward_twice_is_idempotent() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let y = x.mul(x).unwrap().sum();
        y.backward().unwrap();
        let first = x.grad().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), first);
        assert_eq!(first.data(), &[2.0, -4.0]);
    }

    #[test]
    fn clamp_gradient_convention() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 0.5, 1.0, 2.0]));
        x.clamp(0.0, 1.0).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        x.mul(c).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 5.0);
        assert!(c.grad().is_none());
    }

    #[test]
    fn conv_same_padding_identity_kernel() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]));
        // taps at t-2, t, t+2 with weights 1, 10, 100
        let w = tape.leaf(Tensor::new(vec![3, 1, 1], vec![1.0, 10.0, 100.0]).unwrap());
        let y = tape.conv1d(x, w, 2).unwrap();
        assert_eq!(y.data().data(), &[310.0, 420.0, 31.0, 42.0]);
    }

    #[test]
    fn softmin_of_single_value_is_exact() {
        for gamma in [1e-3, 0.5, 10.0] {
            assert_eq!(softmin(&[0.37], gamma), 0.37);
        }
    }

    #[test]
    fn softmin_closed_form() {
        let v = softmin(&[0.0, 1.0], 0.1);
        let expected = -0.1 * (1.0 + (-10.0f64).exp()).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!(v.abs() < 5e-6);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1e4), 1e4);
        assert!(softplus(-1e4) >= 0.0 && softplus(-1e4) < 1e-300);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
