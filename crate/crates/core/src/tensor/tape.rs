use std::fmt;

use matrixmultiply::dgemm;

use super::{broadcast_strides, for_each_broadcast, split_at_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Negate,
    Square,
}

impl UnaryKind {
    pub(crate) fn name(self) -> &'static str {
        match self {
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Negate => "negate",
            UnaryKind::Square => "square",
        }
    }
}

pub(crate) type DerivFn = Box<dyn Fn(f64, f64) -> f64>;

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, UnaryKind),
    /// Elementwise map with a caller-supplied derivative `d(x, y)`.
    Map(Var, DerivFn),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    BroadcastTo(Var),
    Gather {
        src: Var,
        axis: usize,
        indices: Vec<usize>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the graph.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    /// Values produced by `detach`, in call order.
    detached: Vec<Var>,
    /// Values to hand out from `detach` instead of the live ones.
    replay: std::collections::VecDeque<Tensor>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `detach` calls return `values` in order instead of the
    /// current forward values. Finite-difference checks use this to hold
    /// stop-gradient targets fixed while other inputs are perturbed.
    pub fn replaying_detached(values: Vec<Tensor>) -> Self {
        Tape {
            replay: values.into(),
            ..Self::default()
        }
    }

    /// Every value `detach` has produced so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached.iter().map(|v| self.value(*v).clone()).collect()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Copy of `v` as a constant: the forward value is kept, gradient flow stops.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = match self.replay.pop_front() {
            Some(t) if t.shape() == self.shape(v) => t,
            _ => self.nodes[v.0].value.clone(),
        };
        let out = self.constant(value);
        self.detached.push(out);
        out
    }

    pub(crate) fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|data| Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Linear(x, w, b) => {
                self.matmul_backward(*x, *w, g, grads);
                if self.wants(*b) {
                    let out = node.value.shape()[1];
                    let gb = acc(grads, *b, out);
                    for row in g.chunks_exact(out) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (s, v) in ga.iter_mut().zip(g) {
                        *s += v;
                    }
                }
                if self.wants(*b) {
                    let bshape = self.shape(*b).to_vec();
                    let strides = broadcast_strides(&bshape, node.value.shape())
                        .expect("validated in forward");
                    let gb = acc(grads, *b, bshape.iter().product());
                    for_each_broadcast(&bshape, node.value.shape(), &strides, |i, j| {
                        gb[j] += sign * g[i];
                    });
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bshape = self.shape(*b).to_vec();
                let bv = self.value(*b).data();
                let strides =
                    broadcast_strides(&bshape, node.value.shape()).expect("validated in forward");
                if self.wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for_each_broadcast(&bshape, node.value.shape(), &strides, |i, j| {
                        ga[i] += g[i] * bv[j];
                    });
                }
                if self.wants(*b) {
                    let gb = acc(grads, *b, bv.len());
                    for_each_broadcast(&bshape, node.value.shape(), &strides, |i, j| {
                        gb[j] += g[i] * av[i];
                    });
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, *a, g.len());
                for (s, v) in ga.iter_mut().zip(g) {
                    *s += c * v;
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let ga = acc(grads, *a, g.len());
                for (s, v) in ga.iter_mut().zip(g) {
                    *s += v;
                }
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                match kind {
                    UnaryKind::Tanh => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * (1.0 - y[i] * y[i]);
                        }
                    }
                    UnaryKind::Sigmoid => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                    UnaryKind::Exp => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * y[i];
                        }
                    }
                    UnaryKind::Log => {
                        for i in 0..g.len() {
                            ga[i] += g[i] / x[i];
                        }
                    }
                    UnaryKind::Negate => {
                        for i in 0..g.len() {
                            ga[i] -= g[i];
                        }
                    }
                    UnaryKind::Square => {
                        for i in 0..g.len() {
                            ga[i] += 2.0 * g[i] * x[i];
                        }
                    }
                }
            }
            Op::Map(a, deriv) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * deriv(x[i], y[i]);
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let ashape = self.shape(*a).to_vec();
                let total: usize = ashape.iter().product();
                let ga = acc(grads, *a, total);
                let is_mean = matches!(node.op, Op::Mean(..));
                match axis {
                    None => {
                        let s = if is_mean { g[0] / total as f64 } else { g[0] };
                        for v in ga.iter_mut() {
                            *v += s;
                        }
                    }
                    Some(ax) => {
                        let (outer, n, inner) = split_at_axis(&ashape, *ax);
                        let scale = if is_mean { 1.0 / n as f64 } else { 1.0 };
                        for o in 0..outer {
                            for k in 0..n {
                                let dst = &mut ga[(o * n + k) * inner..(o * n + k + 1) * inner];
                                let src = &g[o * inner..(o + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += scale * s;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        let gp = acc(grads, *p, outer * n * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut gp[o * n * inner..(o + 1) * n * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { src, axis, start } => {
                let sshape = self.shape(*src).to_vec();
                let (outer, total, inner) = split_at_axis(&sshape, *axis);
                let n = node.value.shape()[*axis];
                let gs = acc(grads, *src, outer * total * inner);
                for o in 0..outer {
                    let dst = &mut gs[(o * total + start) * inner..(o * total + start + n) * inner];
                    let s = &g[o * n * inner..(o + 1) * n * inner];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
            Op::Gather { src, axis, indices } => {
                let sshape = self.shape(*src).to_vec();
                let (outer, total, inner) = split_at_axis(&sshape, *axis);
                let n = indices.len();
                let gs = acc(grads, *src, outer * total * inner);
                for o in 0..outer {
                    for (k, &idx) in indices.iter().enumerate() {
                        let dst = &mut gs[(o * total + idx) * inner..(o * total + idx + 1) * inner];
                        let s = &g[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, v) in dst.iter_mut().zip(s) {
                            *d += v;
                        }
                    }
                }
            }
            Op::BroadcastTo(a) => {
                let ashape = self.shape(*a).to_vec();
                let strides =
                    broadcast_strides(&ashape, node.value.shape()).expect("validated in forward");
                let ga = acc(grads, *a, ashape.iter().product());
                for_each_broadcast(&ashape, node.value.shape(), &strides, |i, j| ga[j] += g[i]);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        if self.wants(a) {
            let bv = self.value(b).data();
            let ga = acc(grads, a, m * k);
            // dA += G · Bᵀ
            // SAFETY: g is m×n, b is k×n read transposed, ga is m×k.
            unsafe {
                dgemm(
                    m, n, k, 1.0,
                    g.as_ptr(), n as isize, 1,
                    bv.as_ptr(), 1, n as isize,
                    1.0,
                    ga.as_mut_ptr(), k as isize, 1,
                );
            }
        }
        if self.wants(b) {
            let av = self.value(a).data();
            let gb = acc(grads, b, k * n);
            // dB += Aᵀ · G
            // SAFETY: a is m×k read transposed, g is m×n, gb is k×n.
            unsafe {
                dgemm(
                    k, m, n, 1.0,
                    av.as_ptr(), 1, k as isize,
                    g.as_ptr(), n as isize, 1,
                    1.0,
                    gb.as_mut_ptr(), n as isize, 1,
                );
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// C = A·B for row-major A [m×k], B [k×n].
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // SAFETY: slice lengths are m*k, k*n and m*n with the row-major strides below.
    unsafe {
        dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
    c
}
