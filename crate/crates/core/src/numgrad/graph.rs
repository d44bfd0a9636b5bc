//! Append-only computation graph with eager forward evaluation and
//! reverse-mode differentiation.
//!
//! Every builder method computes its output immediately and caches it on the
//! node, so `evaluate` is a lookup and `backward` replays the tape in reverse.
//! The primitive set is fixed: add, sub, mul, matmul, sum, mean, square, exp,
//! log, softplus (base 2 or e), softmax, log-sum-exp, reciprocal, clamp-min,
//! slice, reshape, broadcast. Anything else is composed from these.

use std::collections::HashMap;

use thiserror::Error;

use super::tensor::{increment_index, row_major_strides, Tensor, TensorError};

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("node {0} does not exist in this graph")]
    MissingNode(NodeId),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient accumulated at node {0}")]
    NonFiniteGrad(NodeId),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Base of the softplus activation, `log_b(1 + e^x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftplusBase {
    Two,
    E,
}

impl SoftplusBase {
    pub fn ln(self) -> f64 {
        match self {
            SoftplusBase::Two => std::f64::consts::LN_2,
            SoftplusBase::E => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus { input: NodeId, base: SoftplusBase },
    Softmax { input: NodeId, axis: usize },
    LogSumExp { inputs: Vec<NodeId> },
    Recip(NodeId),
    ClampMin { input: NodeId, floor: f64 },
    Slice { input: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    Broadcast(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus { .. } => "softplus",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Recip(..) => "recip",
            Op::ClampMin { .. } => "clamp_min",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Broadcast(..) => "broadcast",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// The tape. Nodes are append-only, so every node's inputs precede it and a
/// single reverse sweep visits each node exactly once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
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

    /// Node ids flagged trainable, in creation order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Returns the cached value of `node`.
    pub fn evaluate(&self, node: NodeId) -> Result<&Tensor, GraphError> {
        self.nodes
            .get(node)
            .map(|n| &n.value)
            .ok_or(GraphError::MissingNode(node))
    }

    pub fn shape(&self, node: NodeId) -> Result<&[usize], GraphError> {
        self.evaluate(node).map(|t| t.shape())
    }

    fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(id).ok_or(GraphError::MissingNode(id))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId, GraphError> {
        if !value.all_finite() {
            return Err(GraphError::NonFinite { op: op.name() });
        }
        let id = self.nodes.len();
        if matches!(op, Op::Param) {
            self.params.push(id);
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    // ----- leaves -----

    /// Non-trainable leaf (data, targets).
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.push(Op::Input, value, false)
    }

    /// Trainable leaf; receives a gradient from `backward`.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.push(Op::Param, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, GraphError> {
        self.push(Op::Const, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId, GraphError> {
        self.constant(Tensor::scalar(value))
    }

    // ----- elementwise binary -----

    fn binary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape() != vb.shape() {
            return Err(GraphError::ShapeMismatch {
                op: op_name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = va.zip(vb, f)?;
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(make(a, b), value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let value = va.matmul(vb).map_err(|_| GraphError::ShapeMismatch {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(Op::MatMul(a, b), value, rg)
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let value = Tensor::scalar(self.node(a)?.value.sum());
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let value = Tensor::scalar(self.node(a)?.value.mean());
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Mean(a), value, rg)
    }

    // ----- elementwise unary -----

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        let value = self.node(a)?.value.map(f);
        let rg = self.nodes[a].requires_grad;
        self.push(make(a), value, rg)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// Natural logarithm. Non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn softplus(&mut self, a: NodeId, base: SoftplusBase) -> Result<NodeId, GraphError> {
        let ln_base = base.ln();
        self.unary(
            a,
            |x| stable_softplus(x) / ln_base,
            |input| Op::Softplus { input, base },
        )
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(a, |x| 1.0 / x, Op::Recip)
    }

    /// `max(x, floor)` elementwise. Gradient passes through where `x >= floor`
    /// and is zero where the floor binds.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId, GraphError> {
        self.unary(a, |x| x.max(floor), |input| Op::ClampMin { input, floor })
    }

    // ----- structured ops -----

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        let va = &self.node(a)?.value;
        if axis >= va.rank() {
            return Err(GraphError::Invalid {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, va.shape()),
            });
        }
        let mut data = va.data().to_vec();
        for_each_lane(va.shape(), axis, |offsets| {
            let max = offsets
                .iter()
                .map(|&o| data[o])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &o in offsets {
                data[o] = (data[o] - max).exp();
                denom += data[o];
            }
            for &o in offsets {
                data[o] /= denom;
            }
        });
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Softmax { input: a, axis }, value, rg)
    }

    /// Elementwise `log(sum_i exp(x_i))` across a list of same-shaped tensors,
    /// computed in log-space with max-subtraction.
    pub fn logsumexp(&mut self, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        if inputs.is_empty() {
            return Err(GraphError::Invalid {
                op: "logsumexp",
                msg: "needs at least one input".into(),
            });
        }
        let shape = self.node(inputs[0])?.value.shape().to_vec();
        for &id in &inputs[1..] {
            let s = self.node(id)?.value.shape();
            if s != shape.as_slice() {
                return Err(GraphError::ShapeMismatch {
                    op: "logsumexp",
                    lhs: shape,
                    rhs: s.to_vec(),
                });
            }
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0; len];
        for (j, slot) in data.iter_mut().enumerate() {
            let max = inputs
                .iter()
                .map(|&id| self.nodes[id].value.data()[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = inputs
                .iter()
                .map(|&id| (self.nodes[id].value.data()[j] - max).exp())
                .sum();
            *slot = max + sum.ln();
        }
        let value = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|&id| self.nodes[id].requires_grad);
        self.push(
            Op::LogSumExp {
                inputs: inputs.to_vec(),
            },
            value,
            rg,
        )
    }

    /// Contiguous sub-range `[start, end)` along one axis.
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, GraphError> {
        let va = &self.node(a)?.value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(GraphError::Invalid {
                op: "slice",
                msg: format!(
                    "range {}..{} on axis {} of shape {:?}",
                    start, end, axis, shape
                ),
            });
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let value = copy_slice(va, axis, start, &out_shape);
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Slice { input: a, axis, start }, value, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        let va = &self.node(a)?.value;
        let value = va
            .reshaped(shape.clone())
            .map_err(|_| GraphError::ShapeMismatch {
                op: "reshape",
                lhs: va.shape().to_vec(),
                rhs: shape,
            })?;
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Reshape(a), value, rg)
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        let va = &self.node(a)?.value;
        let value = va
            .broadcast_to(shape)
            .map_err(|_| GraphError::ShapeMismatch {
                op: "broadcast",
                lhs: va.shape().to_vec(),
                rhs: shape.to_vec(),
            })?;
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Broadcast(a), value, rg)
    }

    // ----- composites (no new primitives) -----

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let shape = self.shape(a)?.to_vec();
        let s = self.scalar(c)?;
        let b = self.broadcast(s, &shape)?;
        self.mul(a, b)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let shape = self.shape(a)?.to_vec();
        let s = self.scalar(c)?;
        let b = self.broadcast(s, &shape)?;
        self.add(a, b)
    }

    /// `tanh` composed from the primitive set: the input is clamped to
    /// `[-30, 30]` (where tanh is saturated to machine precision) so that
    /// `exp(2x)` stays finite, then `1 - 2 / (1 + e^{2x})`.
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let lo = self.clamp_min(a, -30.0)?;
        let neg_lo = self.neg(lo)?;
        let capped = self.clamp_min(neg_lo, -30.0)?;
        let t = self.neg(capped)?;
        let doubled = self.scale(t, 2.0)?;
        let e = self.exp(doubled)?;
        let denom = self.add_scalar(e, 1.0)?;
        let inv = self.recip(denom)?;
        let twice = self.scale(inv, 2.0)?;
        let one = self.scalar(1.0)?;
        let ones = self.broadcast(one, &self.shape(twice)?.to_vec())?;
        self.sub(ones, twice)
    }

    /// `w · x + b` with the bias broadcast across columns; `b` is optional.
    pub fn affine(
        &mut self,
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, GraphError> {
        let wx = self.matmul(w, x)?;
        match b {
            Some(b) => {
                let shape = self.shape(wx)?.to_vec();
                let bb = self.broadcast(b, &shape)?;
                self.add(wx, bb)
            }
            None => Ok(wx),
        }
    }

    /// Arithmetic mean of a list of same-shaped nodes.
    pub fn mean_of(&mut self, nodes: &[NodeId]) -> Result<NodeId, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::Invalid {
                op: "mean_of",
                msg: "needs at least one node".into(),
            });
        }
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = self.add(acc, n)?;
        }
        self.scale(acc, 1.0 / nodes.len() as f64)
    }

    // ----- backward -----

    /// Gradient of a scalar loss with respect to every `param` leaf.
    ///
    /// Non-parameter leaves receive no gradient; parameters untouched by the
    /// loss get a zero gradient of their own shape.
    pub fn backward(&self, loss: NodeId) -> Result<HashMap<NodeId, Tensor>, GraphError> {
        let loss_node = self.node(loss)?;
        if !loss_node.value.is_scalar() {
            return Err(GraphError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::new(
            loss_node.value.shape().to_vec(),
            vec![1.0],
        )?);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !g.all_finite() {
                return Err(GraphError::NonFiniteGrad(id));
            }
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Param) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
        }

        let mut out = HashMap::with_capacity(self.params.len());
        for &pid in &self.params {
            let g = grads[pid]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[pid].value.shape()));
            out.insert(pid, g);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        id: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), GraphError> {
        let value = |nid: NodeId| &self.nodes[nid].value;
        let mut send = |nid: NodeId, delta: Tensor| -> Result<(), GraphError> {
            if !self.nodes[nid].requires_grad {
                return Ok(());
            }
            match &mut grads[nid] {
                Some(acc) => acc.add_assign(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &self.nodes[id].op {
            Op::Input | Op::Param | Op::Const => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                send(*a, g.mul(value(*b))?)?;
                send(*b, g.mul(value(*a))?)?;
            }
            Op::MatMul(a, b) => {
                send(*a, g.matmul(&value(*b).transposed()?)?)?;
                send(*b, value(*a).transposed()?.matmul(g)?)?;
            }
            Op::Sum(a) => {
                send(*a, Tensor::full(value(*a).shape(), g.item()))?;
            }
            Op::Mean(a) => {
                let n = value(*a).len() as f64;
                send(*a, Tensor::full(value(*a).shape(), g.item() / n))?;
            }
            Op::Square(a) => {
                send(*a, g.zip(value(*a), |gi, x| 2.0 * x * gi)?)?;
            }
            Op::Exp(a) => {
                send(*a, g.mul(&self.nodes[id].value)?)?;
            }
            Op::Log(a) => {
                send(*a, g.zip(value(*a), |gi, x| gi / x)?)?;
            }
            Op::Softplus { input, base } => {
                let ln_base = base.ln();
                send(
                    *input,
                    g.zip(value(*input), |gi, x| gi * stable_sigmoid(x) / ln_base)?,
                )?;
            }
            Op::Softmax { input, axis } => {
                let s = &self.nodes[id].value;
                let mut data = vec![0.0; s.len()];
                for_each_lane(s.shape(), *axis, |offsets| {
                    let dot: f64 = offsets.iter().map(|&o| g.data()[o] * s.data()[o]).sum();
                    for &o in offsets {
                        data[o] = s.data()[o] * (g.data()[o] - dot);
                    }
                });
                send(*input, Tensor::new(s.shape().to_vec(), data)?)?;
            }
            Op::LogSumExp { inputs } => {
                let out = &self.nodes[id].value;
                for &nid in inputs {
                    let delta = Tensor::new(
                        out.shape().to_vec(),
                        value(nid)
                            .data()
                            .iter()
                            .zip(out.data())
                            .zip(g.data())
                            .map(|((&x, &o), &gi)| gi * (x - o).exp())
                            .collect(),
                    )?;
                    send(nid, delta)?;
                }
            }
            Op::Recip(a) => {
                let out = &self.nodes[id].value;
                send(*a, g.zip(out, |gi, y| -gi * y * y)?)?;
            }
            Op::ClampMin { input, floor } => {
                let floor = *floor;
                send(
                    *input,
                    g.zip(value(*input), |gi, x| if x >= floor { gi } else { 0.0 })?,
                )?;
            }
            Op::Slice { input, axis, start } => {
                let full = value(*input);
                let mut data = vec![0.0; full.len()];
                scatter_slice(&mut data, full.shape(), *axis, *start, g);
                send(*input, Tensor::new(full.shape().to_vec(), data)?)?;
            }
            Op::Reshape(a) => {
                send(*a, g.reshaped(value(*a).shape().to_vec())?)?;
            }
            Op::Broadcast(a) => {
                send(*a, g.reduce_to(value(*a).shape())?)?;
            }
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Visit each 1-d lane along `axis`, passing the flat offsets of its elements.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut offsets = vec![0usize; dim];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in offsets.iter_mut().enumerate() {
                *slot = (o * dim + j) * inner + i;
            }
            f(&offsets);
        }
    }
}

fn copy_slice(t: &Tensor, axis: usize, start: usize, out_shape: &[usize]) -> Tensor {
    let in_strides = row_major_strides(t.shape());
    let len: usize = out_shape.iter().product();
    let mut data = vec![0.0; len];
    let mut idx = vec![0usize; out_shape.len()];
    for slot in data.iter_mut() {
        let mut src = 0;
        for (ax, &i) in idx.iter().enumerate() {
            let j = if ax == axis { i + start } else { i };
            src += j * in_strides[ax];
        }
        *slot = t.data()[src];
        increment_index(&mut idx, out_shape);
    }
    Tensor::new(out_shape.to_vec(), data).expect("slice shape is consistent")
}

fn scatter_slice(dst: &mut [f64], full_shape: &[usize], axis: usize, start: usize, g: &Tensor) {
    let full_strides = row_major_strides(full_shape);
    let mut idx = vec![0usize; g.rank()];
    for &v in g.data() {
        let mut off = 0;
        for (ax, &i) in idx.iter().enumerate() {
            let j = if ax == axis { i + start } else { i };
            off += j * full_strides[ax];
        }
        dst[off] += v;
        increment_index(&mut idx, g.shape());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn doubling_via_self_add() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.add(x, x).unwrap();
        assert_eq!(g.evaluate(y).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut g = Graph::new();
        let eye = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = g.input(t(&[2, 2], &[3.0, -1.0, 2.0, 0.5])).unwrap();
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.evaluate(y).unwrap().data(), &[3.0, -1.0, 2.0, 0.5]);
    }

    #[test]
    fn softplus_base2_at_zero_is_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0)).unwrap();
        let y = g.softplus(x, SoftplusBase::Two).unwrap();
        assert!((g.evaluate(y).unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads[&x].item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn self_add_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(5.0)).unwrap();
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[&x].item(), 2.0);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(GraphError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn untouched_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let used = g.param(Tensor::scalar(2.0)).unwrap();
        let unused = g.param(t(&[2], &[1.0, 1.0])).unwrap();
        let y = g.square(used).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads[&unused].data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_of_negative_is_a_structured_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(-1.0)).unwrap();
        let err = g.log(x).unwrap_err();
        assert!(matches!(err, GraphError::NonFinite { op: "log" }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 3], &[0.1, -2.0, 5.0, 1.0, 1.0, 1.0])).unwrap();
        let y = g.softmax(x, 1).unwrap();
        let v = g.evaluate(y).unwrap();
        for row in 0..2 {
            let s: f64 = (0..3).map(|j| v.at(&[row, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tanh_composite_matches_std() {
        let mut g = Graph::new();
        let xs = [-40.0, -3.0, -0.5, 0.0, 0.5, 3.0, 40.0];
        let x = g.input(t(&[7], &xs)).unwrap();
        let y = g.tanh(x).unwrap();
        let v = g.evaluate(y).unwrap();
        for (got, want) in v.data().iter().zip(xs.iter().map(|x| x.tanh())) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn logsumexp_of_one_input_is_identity() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, -2.0, 700.0])).unwrap();
        let y = g.logsumexp(&[x]).unwrap();
        let v = g.evaluate(y).unwrap();
        assert!((v.data()[0] - 1.0).abs() < 1e-12);
        assert!((v.data()[2] - 700.0).abs() < 1e-9);
    }

    #[test]
    fn slice_backward_scatters() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let s = g.slice(x, 1, 1, 3).unwrap();
        assert_eq!(g.evaluate(s).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
        let total = g.sum(s).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads[&x].data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.input(t(&[2, 2], &[0.3, -0.7, 1.9, 2.2])).unwrap();
            let e = g.exp(x).unwrap();
            let s = g.softmax(e, 0).unwrap();
            let m = g.mean(s).unwrap();
            g.evaluate(m).unwrap().item()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
