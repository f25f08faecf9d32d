//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape of op records in topological order. Every op
//! constructor evaluates eagerly and appends a node; [`Graph::backward`]
//! walks the tape once in reverse. Because each record keeps its op kind
//! and input ids, the whole tape can be re-evaluated with new leaf values
//! ([`Graph::replay`]), which is what finite-difference checking uses.
//!
//! Graphs are single-owner and are rebuilt for every forward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{axis_split, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scalar function paired with its derivative, for [`Graph::map`].
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Sin,
    Cos,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    Square,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Square => "square",
        }
    }
}

#[derive(Clone)]
enum OpKind {
    Leaf { name: Option<String>, trainable: bool },
    Add,
    Sub,
    Mul,
    AddRow,
    Scale(f64),
    Offset(f64),
    MatMul,
    Transpose,
    Unary(Unary),
    Map(ScalarFn, ScalarFn),
    Sum,
    Softmax { mask: Option<Arc<[bool]>>, axis: usize },
    LogSoftmax { axis: usize },
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Gather(Arc<[usize]>),
    Bmm,
    BmmNt,
    MaskedAttention { mask: Option<Arc<[bool]>> },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf { .. } => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale(_) => "scale",
            OpKind::Offset(_) => "offset",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Unary(u) => u.name(),
            OpKind::Map(..) => "map",
            OpKind::Sum => "sum",
            OpKind::Softmax { .. } => "masked_softmax",
            OpKind::LogSoftmax { .. } => "log_softmax",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Gather(_) => "gather",
            OpKind::Bmm => "bmm",
            OpKind::BmmNt => "bmm_nt",
            OpKind::MaskedAttention { .. } => "masked_attention",
        }
    }
}

struct Node {
    kind: OpKind,
    args: Vec<Var>,
    value: Tensor,
    /// Op-specific activations kept for the backward pass.
    saved: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A differentiation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A named, trainable leaf.
    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        self.leaf(Some(name.to_string()), true, value)
    }

    /// An anonymous trainable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(None, true, value)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(None, false, value)
    }

    fn leaf(&mut self, name: Option<String>, trainable: bool, value: Tensor) -> Var {
        self.nodes.push(Node {
            kind: OpKind::Leaf { name, trainable },
            args: Vec::new(),
            value,
            saved: None,
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Trainable leaves in creation order, with their names.
    pub fn trainable_leaves(&self) -> Vec<(Var, Option<&str>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.kind {
                OpKind::Leaf {
                    name,
                    trainable: true,
                } => Some((Var(i), name.as_deref())),
                _ => None,
            })
            .collect()
    }

    pub fn find_input(&self, name: &str) -> Option<Var> {
        self.nodes.iter().position(|n| {
            matches!(&n.kind, OpKind::Leaf { name: Some(nm), .. } if nm == name)
        })
        .map(Var)
    }

    /// Replaces a leaf's value; call [`Graph::replay`] afterwards.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.kind, OpKind::Leaf { .. }) {
            return Err(Error::contract("set_leaf on a non-leaf node"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_leaf",
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in tape order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].kind, OpKind::Leaf { .. }) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let (value, saved) = eval(&node.kind, &node.args, before)?;
            check_finite(&node.kind, &value)?;
            node.value = value;
            node.saved = saved;
        }
        Ok(())
    }

    /// Sets the named leaves and re-runs the tape.
    pub fn forward(&mut self, inputs: &[(&str, Tensor)]) -> Result<()> {
        for (name, t) in inputs {
            let v = self
                .find_input(name)
                .ok_or_else(|| Error::contract(format!("graph has no input named {name}")))?;
            self.set_leaf(v, t.clone())?;
        }
        self.replay()
    }

    fn push(&mut self, kind: OpKind, args: Vec<Var>) -> Result<Var> {
        let (value, saved) = eval(&kind, &args, &self.nodes)?;
        check_finite(&kind, &value)?;
        let needs_grad = args.iter().any(|a| self.nodes[a.0].needs_grad);
        self.nodes.push(Node {
            kind,
            args,
            value,
            saved,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::Sub, vec![a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::Mul, vec![a, b])
    }

    /// Adds a length-`n` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(OpKind::AddRow, vec![a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(OpKind::Scale(c), vec![a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(OpKind::Offset(c), vec![a])
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::MatMul, vec![a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Transpose, vec![a])
    }

    pub fn unary(&mut self, a: Var, op: Unary) -> Result<Var> {
        self.push(OpKind::Unary(op), vec![a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sin)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    /// Element-wise custom function with a caller-supplied derivative.
    pub fn map(&mut self, a: Var, f: ScalarFn, df: ScalarFn) -> Result<Var> {
        self.push(OpKind::Map(f, df), vec![a])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(OpKind::Sum, vec![a])
    }

    /// `Σ a ⊙ w` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let w = self.constant(weights);
        let p = self.mul(a, w)?;
        self.sum(p)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(OpKind::Softmax { mask: None, axis }, vec![a])
    }

    /// Softmax along `axis` over unmasked entries only; masked outputs are 0.
    pub fn masked_softmax(&mut self, a: Var, mask: Arc<[bool]>, axis: usize) -> Result<Var> {
        self.push(
            OpKind::Softmax {
                mask: Some(mask),
                axis,
            },
            vec![a],
        )
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(OpKind::LogSoftmax { axis }, vec![a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(OpKind::Reshape(shape.to_vec()), vec![a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(OpKind::Concat { axis }, parts.to_vec())
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.push(OpKind::Slice { axis, start, len }, vec![a])
    }

    /// Selects rows (entries along axis 0) by index; repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var> {
        self.push(OpKind::Gather(indices), vec![a])
    }

    /// Batched `a[b] · b[b]` for `a: [Ba, M, K]`, `b: [Bb, K, N]`; a batch
    /// extent of 1 broadcasts.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::Bmm, vec![a, b])
    }

    /// Batched `a[b] · b[b]ᵀ` for `a: [Ba, M, K]`, `b: [Bb, N, K]`; a batch
    /// extent of 1 broadcasts.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::BmmNt, vec![a, b])
    }

    /// Masked attention kernel.
    ///
    /// `logits: [B, Q, T]` scores every query against every key;
    /// `values: [B, T, D]`; `mask: [B, T, D]` marks which `(key, dim)`
    /// entries are observed (`None` means all). For each `(b, q, d)` the
    /// output is the softmax-over-observed-keys weighted sum of that
    /// dimension's values. A dimension with no observed key yields 0.
    pub fn masked_attention(
        &mut self,
        logits: Var,
        values: Var,
        mask: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        self.push(OpKind::MaskedAttention { mask }, vec![logits, values])
    }

    /// Reverse pass from a scalar output.
    ///
    /// Every trainable leaf gets a gradient (zeros when unreachable).
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.kind, OpKind::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(node, &self.nodes, &g, &mut grads);
        }
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let t = match node.kind {
                OpKind::Leaf {
                    trainable: true, ..
                } => {
                    let shape = node.value.shape().to_vec();
                    let data = grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::new(shape, data)?)
                }
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }
}

fn check_finite(kind: &OpKind, value: &Tensor) -> Result<()> {
    if value.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: kind.name() })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(op, format!("expected a matrix, got {:?}", s))),
    }
}

fn as_batch3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [b, m, n] => Ok((*b, *m, *n)),
        s => Err(Error::shape(op, format!("expected rank 3, got {:?}", s))),
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis < t.rank() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("axis {axis} out of range for {:?}", t.shape())))
    }
}

type Evaluated = (Tensor, Option<Vec<f64>>);

fn eval(kind: &OpKind, args: &[Var], nodes: &[Node]) -> Result<Evaluated> {
    let arg = |i: usize| &nodes[args[i].0].value;
    let op = kind.name();
    let plain = |t: Tensor| Ok((t, None));
    match kind {
        OpKind::Leaf { .. } => Err(Error::contract("leaf nodes are not evaluated")),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (arg(0), arg(1));
            same_shape(op, a, b)?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| match kind {
                    OpKind::Add => x + y,
                    OpKind::Sub => x - y,
                    _ => x * y,
                })
                .collect();
            plain(Tensor::new(a.shape().to_vec(), data)?)
        }
        OpKind::AddRow => {
            let (a, row) = (arg(0), arg(1));
            let n = row.len();
            if a.shape().last() != Some(&n) {
                return Err(Error::shape(
                    op,
                    format!("{:?} plus row of {}", a.shape(), n),
                ));
            }
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(n) {
                for (x, r) in chunk.iter_mut().zip(row.data()) {
                    *x += r;
                }
            }
            plain(Tensor::new(a.shape().to_vec(), data)?)
        }
        OpKind::Scale(c) => {
            let a = arg(0);
            plain(Tensor::new(
                a.shape().to_vec(),
                a.data().iter().map(|x| x * c).collect(),
            )?)
        }
        OpKind::Offset(c) => {
            let a = arg(0);
            plain(Tensor::new(
                a.shape().to_vec(),
                a.data().iter().map(|x| x + c).collect(),
            )?)
        }
        OpKind::MatMul => {
            let (a, b) = (arg(0), arg(1));
            let (m, k) = as_matrix(op, a)?;
            let (k2, n) = as_matrix(op, b)?;
            if k != k2 {
                return Err(Error::shape(
                    op,
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            kernels::matmul_acc(a.data(), b.data(), m, k, n, &mut out);
            plain(Tensor::new(vec![m, n], out)?)
        }
        OpKind::Transpose => {
            let a = arg(0);
            let (m, n) = as_matrix(op, a)?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.data()[i * n + j];
                }
            }
            plain(Tensor::new(vec![n, m], out)?)
        }
        OpKind::Unary(u) => {
            let a = arg(0);
            plain(Tensor::new(
                a.shape().to_vec(),
                a.data().iter().map(|&x| u.apply(x)).collect(),
            )?)
        }
        OpKind::Map(f, _) => {
            let a = arg(0);
            plain(Tensor::new(
                a.shape().to_vec(),
                a.data().iter().map(|&x| f(x)).collect(),
            )?)
        }
        OpKind::Sum => plain(Tensor::scalar(arg(0).data().iter().sum())),
        OpKind::Softmax { mask, axis } => {
            let a = arg(0);
            check_axis(op, a, *axis)?;
            if let Some(m) = mask {
                if m.len() != a.len() {
                    return Err(Error::shape(
                        op,
                        format!("mask of {} for {:?}", m.len(), a.shape()),
                    ));
                }
            }
            let out = kernels::masked_softmax_axis(a.data(), a.shape(), mask.as_deref(), *axis)?;
            plain(Tensor::new(a.shape().to_vec(), out)?)
        }
        OpKind::LogSoftmax { axis } => {
            let a = arg(0);
            check_axis(op, a, *axis)?;
            let (outer, n, inner) = axis_split(a.shape(), *axis);
            let mut out = vec![0.0; a.len()];
            let mut lane = vec![0.0; n];
            for o in 0..outer {
                for k in 0..inner {
                    for (i, l) in lane.iter_mut().enumerate() {
                        *l = a.data()[(o * n + i) * inner + k];
                    }
                    let lse = kernels::log_sum_exp(&lane);
                    for (i, l) in lane.iter().enumerate() {
                        out[(o * n + i) * inner + k] = l - lse;
                    }
                }
            }
            plain(Tensor::new(a.shape().to_vec(), out)?)
        }
        OpKind::Reshape(shape) => plain(arg(0).clone().reshape(shape.clone())?),
        OpKind::Concat { axis } => {
            let first = arg(0);
            check_axis(op, first, *axis)?;
            let mut shape = first.shape().to_vec();
            let mut total = 0;
            for i in 0..args.len() {
                let t = arg(i);
                let ok = t.rank() == shape.len()
                    && t.shape()
                        .iter()
                        .zip(&shape)
                        .enumerate()
                        .all(|(d, (x, y))| d == *axis || x == y);
                if !ok {
                    return Err(Error::shape(
                        op,
                        format!("{:?} vs {:?} on axis {}", first.shape(), t.shape(), axis),
                    ));
                }
                total += t.shape()[*axis];
            }
            shape[*axis] = total;
            let (outer, _, inner) = axis_split(first.shape(), *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for i in 0..args.len() {
                    let t = arg(i);
                    let block = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            plain(Tensor::new(shape, out)?)
        }
        OpKind::Slice { axis, start, len } => {
            let a = arg(0);
            check_axis(op, a, *axis)?;
            let (outer, n, inner) = axis_split(a.shape(), *axis);
            if start + len > n {
                return Err(Error::shape(
                    op,
                    format!("[{start}, {}) of extent {n}", start + len),
                ));
            }
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            plain(Tensor::new(shape, out)?)
        }
        OpKind::Gather(indices) => {
            let a = arg(0);
            if a.rank() == 0 {
                return Err(Error::shape(op, "cannot gather from a scalar"));
            }
            let rows = a.shape()[0];
            let width = a.len() / rows.max(1);
            let mut out = Vec::with_capacity(indices.len() * width);
            for &r in indices.iter() {
                if r >= rows {
                    return Err(Error::shape(op, format!("row {r} of {rows}")));
                }
                out.extend_from_slice(&a.data()[r * width..(r + 1) * width]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = indices.len();
            plain(Tensor::new(shape, out)?)
        }
        OpKind::Bmm => {
            let (a, b) = (arg(0), arg(1));
            let (ba, m, k) = as_batch3(op, a)?;
            let (bb, k2, n) = as_batch3(op, b)?;
            let batch = broadcast_batch(ba, bb).filter(|_| k == k2).ok_or_else(|| {
                Error::shape(op, format!("{:?} x {:?}", a.shape(), b.shape()))
            })?;
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                let ai = if ba == 1 { 0 } else { i };
                let bi = if bb == 1 { 0 } else { i };
                kernels::matmul_acc(
                    &a.data()[ai * m * k..(ai + 1) * m * k],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            plain(Tensor::new(vec![batch, m, n], out)?)
        }
        OpKind::BmmNt => {
            let (a, b) = (arg(0), arg(1));
            let (ba, m, k) = as_batch3(op, a)?;
            let (bb, n, k2) = as_batch3(op, b)?;
            let batch = broadcast_batch(ba, bb).filter(|_| k == k2).ok_or_else(|| {
                Error::shape(op, format!("{:?} x {:?}ᵀ", a.shape(), b.shape()))
            })?;
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                let ai = if ba == 1 { 0 } else { i };
                let bi = if bb == 1 { 0 } else { i };
                kernels::matmul_nt_acc(
                    &a.data()[ai * m * k..(ai + 1) * m * k],
                    &b.data()[bi * n * k..(bi + 1) * n * k],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            plain(Tensor::new(vec![batch, m, n], out)?)
        }
        OpKind::MaskedAttention { mask } => {
            let (logits, values) = (arg(0), arg(1));
            let (b, q, t) = as_batch3(op, logits)?;
            let (bv, tv, d) = as_batch3(op, values)?;
            if b != bv || t != tv {
                return Err(Error::shape(
                    op,
                    format!("logits {:?} vs values {:?}", logits.shape(), values.shape()),
                ));
            }
            if let Some(m) = mask {
                if m.len() != values.len() {
                    return Err(Error::shape(
                        op,
                        format!("mask of {} for values {:?}", m.len(), values.shape()),
                    ));
                }
            }
            let (out, weights) = attention_forward(logits.data(), values.data(), mask.as_deref(), b, q, t, d);
            Ok((Tensor::new(vec![b, q, d], out)?, Some(weights)))
        }
    }
}

fn broadcast_batch(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        (x, y) if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    }
}

/// Forward masked attention. Returns outputs `[B, Q, D]` and the softmax
/// weights: `[B, Q, T]` when unmasked, `[B, Q, D, T]` otherwise.
fn attention_forward(
    logits: &[f64],
    values: &[f64],
    mask: Option<&[bool]>,
    b: usize,
    q: usize,
    t: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; b * q * d];
    match mask {
        None => {
            let mut weights = vec![0.0; b * q * t];
            for bi in 0..b {
                let vals = &values[bi * t * d..(bi + 1) * t * d];
                for qi in 0..q {
                    let row = (bi * q + qi) * t;
                    let w = &mut weights[row..row + t];
                    // Every lane has at least one key here; t > 0 is checked
                    // by the empty-shape case producing no rows at all.
                    if t > 0 {
                        kernels::masked_softmax_slice(&logits[row..row + t], None, w)
                            .expect("unmasked softmax lane is never empty");
                    }
                    let o = &mut out[(bi * q + qi) * d..(bi * q + qi + 1) * d];
                    for (ti, &wt) in w.iter().enumerate() {
                        for (ov, &v) in o.iter_mut().zip(&vals[ti * d..(ti + 1) * d]) {
                            *ov += wt * v;
                        }
                    }
                }
            }
            (out, weights)
        }
        Some(mask) => {
            let mut weights = vec![0.0; b * q * d * t];
            for bi in 0..b {
                let vals = &values[bi * t * d..(bi + 1) * t * d];
                let msk = &mask[bi * t * d..(bi + 1) * t * d];
                for qi in 0..q {
                    let lg = &logits[(bi * q + qi) * t..(bi * q + qi + 1) * t];
                    for di in 0..d {
                        let base = ((bi * q + qi) * d + di) * t;
                        let w = &mut weights[base..base + t];
                        let mut max = f64::NEG_INFINITY;
                        for ti in 0..t {
                            if msk[ti * d + di] && lg[ti] > max {
                                max = lg[ti];
                            }
                        }
                        if max == f64::NEG_INFINITY {
                            continue;
                        }
                        let mut total = 0.0;
                        for ti in 0..t {
                            if msk[ti * d + di] {
                                w[ti] = (lg[ti] - max).exp();
                                total += w[ti];
                            }
                        }
                        let mut acc = 0.0;
                        for ti in 0..t {
                            w[ti] /= total;
                            acc += w[ti] * vals[ti * d + di];
                        }
                        out[(bi * q + qi) * d + di] = acc;
                    }
                }
            }
            (out, weights)
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn backprop(node: &Node, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let args = &node.args;
    let val = |i: usize| &nodes[args[i].0].value;
    let wants = |i: usize| nodes[args[i].0].needs_grad;
    match &node.kind {
        OpKind::Leaf { .. } => {}
        OpKind::Add | OpKind::Sub => {
            let sign = if matches!(node.kind, OpKind::Sub) { -1.0 } else { 1.0 };
            if wants(0) {
                let acc = accumulate(grads, args[0], g.len());
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            if wants(1) {
                let acc = accumulate(grads, args[1], g.len());
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += sign * x;
                }
            }
        }
        OpKind::Mul => {
            for (i, other) in [(0, 1), (1, 0)] {
                if wants(i) {
                    let o = val(other).data();
                    let acc = accumulate(grads, args[i], g.len());
                    for ((a, x), y) in acc.iter_mut().zip(g).zip(o) {
                        *a += x * y;
                    }
                }
            }
        }
        OpKind::AddRow => {
            if wants(0) {
                let acc = accumulate(grads, args[0], g.len());
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            if wants(1) {
                let n = val(1).len();
                let acc = accumulate(grads, args[1], n);
                for chunk in g.chunks(n) {
                    for (a, x) in acc.iter_mut().zip(chunk) {
                        *a += x;
                    }
                }
            }
        }
        OpKind::Scale(c) => {
            if wants(0) {
                let acc = accumulate(grads, args[0], g.len());
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += c * x;
                }
            }
        }
        OpKind::Offset(_) | OpKind::Reshape(_) => {
            if wants(0) {
                let acc = accumulate(grads, args[0], g.len());
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        OpKind::MatMul => {
            let (a, b) = (val(0), val(1));
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if wants(0) {
                let acc = accumulate(grads, args[0], m * k);
                kernels::matmul_nt_acc(g, b.data(), m, n, k, acc);
            }
            if wants(1) {
                let acc = accumulate(grads, args[1], k * n);
                kernels::matmul_tn_acc(a.data(), g, k, m, n, acc);
            }
        }
        OpKind::Transpose => {
            if wants(0) {
                let (m, n) = (val(0).shape()[0], val(0).shape()[1]);
                let acc = accumulate(grads, args[0], m * n);
                for i in 0..m {
                    for j in 0..n {
                        acc[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        OpKind::Unary(u) => {
            if wants(0) {
                let x = val(0).data();
                let y = node.value.data();
                let acc = accumulate(grads, args[0], g.len());
                for i in 0..g.len() {
                    acc[i] += g[i] * u.derivative(x[i], y[i]);
                }
            }
        }
        OpKind::Map(_, df) => {
            if wants(0) {
                let x = val(0).data();
                let acc = accumulate(grads, args[0], g.len());
                for i in 0..g.len() {
                    acc[i] += g[i] * df(x[i]);
                }
            }
        }
        OpKind::Sum => {
            if wants(0) {
                let n = val(0).len();
                let acc = accumulate(grads, args[0], n);
                for a in acc.iter_mut() {
                    *a += g[0];
                }
            }
        }
        OpKind::Softmax { axis, .. } => {
            if wants(0) {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let acc = accumulate(grads, args[0], y.len());
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + k;
                        let dot: f64 = (0..n).map(|i| y[idx(i)] * g[idx(i)]).sum();
                        for i in 0..n {
                            acc[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
        }
        OpKind::LogSoftmax { axis } => {
            if wants(0) {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let acc = accumulate(grads, args[0], y.len());
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + k;
                        let total: f64 = (0..n).map(|i| g[idx(i)]).sum();
                        for i in 0..n {
                            acc[idx(i)] += g[idx(i)] - y[idx(i)].exp() * total;
                        }
                    }
                }
            }
        }
        OpKind::Concat { axis } => {
            let (outer, total, inner) = axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            for (i, a) in args.iter().enumerate() {
                let n_i = val(i).shape()[*axis];
                if wants(i) {
                    let acc = accumulate(grads, *a, val(i).len());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * n_i * inner;
                        for (d, s) in acc[dst..dst + n_i * inner]
                            .iter_mut()
                            .zip(&g[src..src + n_i * inner])
                        {
                            *d += s;
                        }
                    }
                }
                offset += n_i;
            }
        }
        OpKind::Slice { axis, start, len } => {
            if wants(0) {
                let (outer, n, inner) = axis_split(val(0).shape(), *axis);
                let acc = accumulate(grads, args[0], val(0).len());
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for (d, s) in acc[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[src..src + len * inner])
                    {
                        *d += s;
                    }
                }
            }
        }
        OpKind::Gather(indices) => {
            if wants(0) {
                let a = val(0);
                let width = a.len() / a.shape()[0].max(1);
                let acc = accumulate(grads, args[0], a.len());
                for (row, &r) in indices.iter().enumerate() {
                    for (d, s) in acc[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[row * width..(row + 1) * width])
                    {
                        *d += s;
                    }
                }
            }
        }
        OpKind::Bmm => {
            let (a, b) = (val(0), val(1));
            let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bb, n) = (b.shape()[0], b.shape()[2]);
            let batch = node.value.shape()[0];
            if wants(0) {
                let acc = accumulate(grads, args[0], a.len());
                for i in 0..batch {
                    let ai = if ba == 1 { 0 } else { i };
                    let bi = if bb == 1 { 0 } else { i };
                    kernels::matmul_nt_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut acc[ai * m * k..(ai + 1) * m * k],
                    );
                }
            }
            if wants(1) {
                let acc = accumulate(grads, args[1], b.len());
                for i in 0..batch {
                    let ai = if ba == 1 { 0 } else { i };
                    let bi = if bb == 1 { 0 } else { i };
                    kernels::matmul_tn_acc(
                        &a.data()[ai * m * k..(ai + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut acc[bi * k * n..(bi + 1) * k * n],
                    );
                }
            }
        }
        OpKind::BmmNt => {
            let (a, b) = (val(0), val(1));
            let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bb, n) = (b.shape()[0], b.shape()[1]);
            let batch = node.value.shape()[0];
            if wants(0) {
                let acc = accumulate(grads, args[0], a.len());
                for i in 0..batch {
                    let ai = if ba == 1 { 0 } else { i };
                    let bi = if bb == 1 { 0 } else { i };
                    kernels::matmul_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &b.data()[bi * n * k..(bi + 1) * n * k],
                        m,
                        n,
                        k,
                        &mut acc[ai * m * k..(ai + 1) * m * k],
                    );
                }
            }
            if wants(1) {
                let acc = accumulate(grads, args[1], b.len());
                for i in 0..batch {
                    let ai = if ba == 1 { 0 } else { i };
                    let bi = if bb == 1 { 0 } else { i };
                    kernels::matmul_tn_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &a.data()[ai * m * k..(ai + 1) * m * k],
                        n,
                        m,
                        k,
                        &mut acc[bi * n * k..(bi + 1) * n * k],
                    );
                }
            }
        }
        OpKind::MaskedAttention { mask } => {
            let (logits, values) = (val(0), val(1));
            let (b, q, t) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
            let d = values.shape()[2];
            let weights = node.saved.as_deref().expect("attention weights saved");
            let out = node.value.data();
            let v = values.data();
            let mut d_logits = wants(0).then(|| vec![0.0; logits.len()]);
            let mut d_values = wants(1).then(|| vec![0.0; values.len()]);
            for bi in 0..b {
                for qi in 0..q {
                    let row = bi * q + qi;
                    for di in 0..d {
                        let go = g[row * d + di];
                        if go == 0.0 {
                            continue;
                        }
                        let w = match mask {
                            None => &weights[row * t..(row + 1) * t],
                            Some(_) => &weights[(row * d + di) * t..(row * d + di + 1) * t],
                        };
                        let o = out[row * d + di];
                        for ti in 0..t {
                            let wt = w[ti];
                            if wt == 0.0 {
                                continue;
                            }
                            let vi = (bi * t + ti) * d + di;
                            if let Some(dv) = d_values.as_mut() {
                                dv[vi] += wt * go;
                            }
                            if let Some(dl) = d_logits.as_mut() {
                                dl[row * t + ti] += wt * (v[vi] - o) * go;
                            }
                        }
                    }
                }
            }
            for (i, local) in [(0, d_logits), (1, d_values)] {
                if let Some(local) = local {
                    let acc = accumulate(grads, args[i], local.len());
                    for (a, x) in acc.iter_mut().zip(&local) {
                        *a += x;
                    }
                }
            }
        }
    }
}
