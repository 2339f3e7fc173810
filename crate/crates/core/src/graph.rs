//! Reverse-mode differentiable computation graph.
//!
//! Nodes are appended in construction order, which is also a topological
//! order, and each node's value is computed as soon as it is added. The
//! graph can then be re-run with new leaf bindings ([`Graph::evaluate`]) and
//! differentiated from any scalar node ([`Graph::gradient`]).
//!
//! Leaves are exchanged as `f32` [`Tensor`]s. Node buffers are held in `f64`
//! so that reductions accumulate in double precision and finite-difference
//! probes are not swamped by storage rounding. Every reduction sums its
//! terms left to right in index order, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Softmax { x: NodeId, temperature: f64, mask: Option<Arc<Vec<bool>>> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Gelu(NodeId),
    Mean { x: NodeId, axis: usize },
    Transpose(NodeId),
    Reshape(NodeId),
    Resize { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Arc<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Mean { .. } => "mean",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Resize { .. } => "resize",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Softmax { x, .. }
            | Op::Mean { x, .. }
            | Op::Resize { x } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Trainable,
    Frozen,
    Constant,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    dims: Vec<usize>,
    value: Vec<f64>,
    label: String,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, (NodeId, LeafKind)>,
    outputs: BTreeMap<String, NodeId>,
    scope: String,
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&dims[..axis]), dims[axis], numel(&dims[axis + 1..]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Prefix attached to the labels of nodes created from now on.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.dims.clone(), n.value.iter().map(|&v| v as f32).collect())
            .expect("node dims are validated on construction")
    }

    pub fn value_f64(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).map(|&(id, _)| id)
    }

    pub fn leaf_kind(&self, name: &str) -> Option<LeafKind> {
        self.leaves.get(name).map(|&(_, k)| k)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, (_, k))| *k == LeafKind::Trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn mark_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.outputs.iter().map(|(k, &id)| (k.clone(), self.value(id))).collect()
    }

    // ---------------------------------------------------------------- leaves

    fn push_leaf(&mut self, name: Option<String>, t: &Tensor, kind: LeafKind) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        let label = match &name {
            Some(n) => n.clone(),
            None => format!("{}const#{}", self.scope_prefix(), id.0),
        };
        if !t.is_finite() {
            return Err(Error::numeric(label, "non-finite leaf value"));
        }
        if let Some(n) = name {
            if self.leaves.contains_key(&n) {
                return Err(Error::contract(format!("leaf `{n}` registered twice")));
            }
            self.leaves.insert(n, (id, kind));
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            dims: t.dims().to_vec(),
            value: to_f64(t),
            label,
            requires_grad: kind == LeafKind::Trainable,
        });
        Ok(id)
    }

    pub fn input(&mut self, name: &str, t: &Tensor) -> Result<NodeId> {
        self.push_leaf(Some(name.to_string()), t, LeafKind::Input)
    }

    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Result<NodeId> {
        let kind = if trainable { LeafKind::Trainable } else { LeafKind::Frozen };
        self.push_leaf(Some(name.to_string()), t, kind)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push_leaf(None, t, LeafKind::Constant)
    }

    pub fn zeros(&mut self, dims: &[usize]) -> Result<NodeId> {
        self.constant(&Tensor::zeros(dims))
    }

    // ------------------------------------------------------------ primitives

    fn scope_prefix(&self) -> String {
        if self.scope.is_empty() {
            String::new()
        } else {
            format!("{}/", self.scope)
        }
    }

    fn push_op(&mut self, op: Op, dims: Vec<usize>) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        let label = format!("{}{}#{}", self.scope_prefix(), op.name(), id.0);
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let value = self.compute(&op, &dims).map_err(|e| relabel(e, &label))?;
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(label, "non-finite value"));
        }
        self.nodes.push(Node { op, dims, value, label, requires_grad });
        Ok(id)
    }

    fn shape_err(&self, op: &str, msg: String) -> Error {
        Error::shape(format!("{}{op}#{}", self.scope_prefix(), self.nodes.len()), msg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(self.shape_err("matmul", format!("{da:?} x {db:?}")));
        }
        let dims = vec![da[0], db[1]];
        self.push_op(Op::MatMul(a, b), dims)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("add", format!("{:?} + {:?}", self.dims(a), self.dims(b))));
        }
        let dims = self.dims(a).to_vec();
        self.push_op(Op::Add(a, b), dims)
    }

    /// Adds a vector to every row (broadcast over the leading axes).
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (dx, dr) = (self.dims(x), self.dims(row));
        if dr.len() != 1 || dx[dx.len() - 1] != dr[0] {
            return Err(self.shape_err("add_row", format!("{dx:?} + row {dr:?}")));
        }
        let dims = dx.to_vec();
        self.push_op(Op::AddRow(x, row), dims)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("mul", format!("{:?} * {:?}", self.dims(a), self.dims(b))));
        }
        let dims = self.dims(a).to_vec();
        self.push_op(Op::Mul(a, b), dims)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        self.push_op(Op::Scale(x, factor), dims)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| self.shape_err("concat", "no parts".into()))?;
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            return Err(self.shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            let compatible = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.shape_err("concat", format!("{d:?} vs {base:?} on axis {axis}")));
            }
            total += d[axis];
        }
        let mut dims = base;
        dims[axis] = total;
        self.push_op(Op::Concat { parts: parts.to_vec(), axis }, dims)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let d = self.dims(x);
        if axis >= d.len() || len == 0 || start + len > d[axis] {
            return Err(self.shape_err(
                "slice",
                format!("{start}..{} along axis {axis} of {d:?}", start + len),
            ));
        }
        let mut dims = d.to_vec();
        dims[axis] = len;
        self.push_op(Op::Slice { x, axis, start }, dims)
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn chunk(&mut self, x: NodeId, axis: usize, sizes: &[usize]) -> Result<Vec<NodeId>> {
        let d = self.dims(x);
        if axis >= d.len() || sizes.iter().sum::<usize>() != d[axis] {
            return Err(self.shape_err("chunk", format!("sizes {sizes:?} along axis {axis} of {d:?}")));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        self.masked_softmax(x, temperature, None)
    }

    /// Softmax where entries with `mask[i] == false` get exactly zero weight.
    /// Every row must keep at least one entry.
    pub fn masked_softmax(
        &mut self,
        x: NodeId,
        temperature: f64,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<NodeId> {
        if !(temperature > 0.0) {
            return Err(Error::contract(format!("softmax temperature {temperature} must be > 0")));
        }
        let dims = self.dims(x).to_vec();
        if let Some(m) = &mask {
            let w = dims[dims.len() - 1];
            if m.len() != numel(&dims) {
                return Err(self.shape_err("softmax", format!("mask of {} for {dims:?}", m.len())));
            }
            if m.chunks(w).any(|row| !row.iter().any(|&keep| keep)) {
                return Err(Error::contract("softmax mask removes every entry of a row"));
            }
        }
        self.push_op(Op::Softmax { x, temperature, mask }, dims)
    }

    /// Per-row normalisation over the last axis followed by `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        let w = d[d.len() - 1];
        if self.dims(gamma) != [w] || self.dims(beta) != [w] {
            return Err(self.shape_err(
                "layernorm",
                format!("affine {:?}/{:?} for {d:?}", self.dims(gamma), self.dims(beta)),
            ));
        }
        self.push_op(Op::LayerNorm { x, gamma, beta }, d)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.dims(x).to_vec();
        self.push_op(Op::Gelu(x), dims)
    }

    /// Mean along `axis`, which is removed from the result (a rank-1 input
    /// reduces to a one-element tensor).
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let d = self.dims(x);
        if axis >= d.len() {
            return Err(self.shape_err("mean", format!("axis {axis} of {d:?}")));
        }
        let mut dims: Vec<usize> = d.to_vec();
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        self.push_op(Op::Mean { x, axis }, dims)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let d = self.dims(x);
        if d.len() != 2 {
            return Err(self.shape_err("transpose", format!("rank-2 required, got {d:?}")));
        }
        let dims = vec![d[1], d[0]];
        self.push_op(Op::Transpose(x), dims)
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> Result<NodeId> {
        let d = self.dims(x);
        if numel(d) != numel(dims) || dims.is_empty() || dims.contains(&0) {
            return Err(self.shape_err("reshape", format!("{d:?} -> {dims:?}")));
        }
        self.push_op(Op::Reshape(x), dims.to_vec())
    }

    /// Bilinear resize of a `[C, h, w]` map to `[C, out_h, out_w]` with
    /// half-pixel sample centres.
    pub fn resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let d = self.dims(x);
        if d.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(self.shape_err("resize", format!("{d:?} -> {out_h}x{out_w}")));
        }
        let dims = vec![d[0], out_h, out_w];
        self.push_op(Op::Resize { x }, dims)
    }

    /// Mean cross-entropy of `[B, C]` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let d = self.dims(logits);
        if d.len() != 2 || d[0] != targets.len() {
            return Err(self.shape_err(
                "cross_entropy",
                format!("logits {d:?} with {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= d[1]) {
            return Err(Error::contract(format!("target {t} outside 0..{}", d[1])));
        }
        self.push_op(Op::CrossEntropy { logits, targets: Arc::new(targets.to_vec()) }, vec![1])
    }

    /// Replaces the integer targets of a `cross_entropy` node. Takes effect
    /// at the next [`Graph::recompute`].
    pub fn set_targets(&mut self, loss: NodeId, targets: &[usize]) -> Result<()> {
        let Op::CrossEntropy { logits, .. } = self.nodes[loss.0].op else {
            return Err(Error::contract(format!("`{}` is not a cross_entropy node", self.nodes[loss.0].label)));
        };
        let d = self.dims(logits);
        if d[0] != targets.len() {
            return Err(self.shape_err("cross_entropy", format!("logits {d:?} with {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= d[1]) {
            return Err(Error::contract(format!("target {t} outside 0..{}", d[1])));
        }
        self.nodes[loss.0].op = Op::CrossEntropy { logits, targets: Arc::new(targets.to_vec()) };
        Ok(())
    }

    // --------------------------------------------------------------- forward

    fn val(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    fn compute(&self, op: &Op, out_dims: &[usize]) -> Result<Vec<f64>> {
        let n_out = numel(out_dims);
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not computed"),
            Op::MatMul(a, b) => {
                let (da, db) = (self.dims(*a), self.dims(*b));
                matmul(self.val(*a), self.val(*b), da[0], da[1], db[1])
            }
            Op::Add(a, b) => self.val(*a).iter().zip(self.val(*b)).map(|(x, y)| x + y).collect(),
            Op::AddRow(x, r) => {
                let row = self.val(*r);
                let w = row.len();
                self.val(*x).iter().enumerate().map(|(i, v)| v + row[i % w]).collect()
            }
            Op::Mul(a, b) => self.val(*a).iter().zip(self.val(*b)).map(|(x, y)| x * y).collect(),
            Op::Scale(x, f) => self.val(*x).iter().map(|v| v * f).collect(),
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out_dims, *axis);
                let mut out = Vec::with_capacity(n_out);
                for o in 0..outer {
                    for &p in parts {
                        let block = self.dims(p)[*axis] * inner;
                        out.extend_from_slice(&self.val(p)[o * block..(o + 1) * block]);
                    }
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(out_dims, *axis);
                let src_axis = self.dims(*x)[*axis];
                let src = self.val(*x);
                let mut out = Vec::with_capacity(n_out);
                for o in 0..outer {
                    let base = (o * src_axis + start) * inner;
                    out.extend_from_slice(&src[base..base + len * inner]);
                }
                out
            }
            Op::Softmax { x, temperature, mask } => {
                let w = out_dims[out_dims.len() - 1];
                softmax_rows(self.val(*x), w, *temperature, mask.as_deref().map(|m| m.as_slice()))
            }
            Op::LayerNorm { x, gamma, beta } => {
                let w = out_dims[out_dims.len() - 1];
                let (g, b) = (self.val(*gamma), self.val(*beta));
                let mut out = Vec::with_capacity(n_out);
                for row in self.val(*x).chunks(w) {
                    let (mu, inv) = row_stats(row);
                    for j in 0..w {
                        out.push((row[j] - mu) * inv * g[j] + b[j]);
                    }
                }
                out
            }
            Op::Gelu(x) => self.val(*x).iter().map(|&v| gelu(v)).collect(),
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(self.dims(*x), *axis);
                let src = self.val(*x);
                let mut out = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut s = 0.0;
                        for k in 0..len {
                            s += src[(o * len + k) * inner + i];
                        }
                        out.push(s / len as f64);
                    }
                }
                out
            }
            Op::Transpose(x) => {
                let d = self.dims(*x);
                let src = self.val(*x);
                let mut out = vec![0.0; n_out];
                for i in 0..d[0] {
                    for j in 0..d[1] {
                        out[j * d[0] + i] = src[i * d[1] + j];
                    }
                }
                out
            }
            Op::Reshape(x) => self.val(*x).to_vec(),
            Op::Resize { x } => {
                let d = self.dims(*x);
                bilinear_resize(self.val(*x), d[0], d[1], d[2], out_dims[1], out_dims[2])
            }
            Op::CrossEntropy { logits, targets } => {
                let c = self.dims(*logits)[1];
                let mut total = 0.0;
                for (row, &t) in self.val(*logits).chunks(c).zip(targets.iter()) {
                    total += log_sum_exp(row) - row[t];
                }
                vec![total / targets.len() as f64]
            }
        })
    }

    /// Rebinds the named leaves and recomputes every node. Returns the marked
    /// outputs.
    pub fn evaluate(&mut self, inputs: &[(&str, &Tensor)]) -> Result<BTreeMap<String, Tensor>> {
        for (name, t) in inputs {
            self.bind(name, t)?;
        }
        self.recompute()?;
        Ok(self.outputs())
    }

    /// Replaces a leaf's value without recomputing dependents.
    pub fn bind(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let &(id, _) = self
            .leaves
            .get(name)
            .ok_or_else(|| Error::contract(format!("no leaf named `{name}`")))?;
        if self.nodes[id.0].dims != t.dims() {
            return Err(Error::shape(
                name,
                format!("bound {:?}, leaf has {:?}", t.dims(), self.nodes[id.0].dims),
            ));
        }
        if !t.is_finite() {
            return Err(Error::numeric(name, "non-finite leaf value"));
        }
        self.nodes[id.0].value = to_f64(t);
        Ok(())
    }

    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self
                .compute(&self.nodes[i].op, &self.nodes[i].dims)
                .map_err(|e| relabel(e, &self.nodes[i].label))?;
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(self.nodes[i].label.clone(), "non-finite value"));
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    // -------------------------------------------------------------- backward

    fn check_trainable(&self, name: &str) -> Result<NodeId> {
        match self.leaves.get(name) {
            Some(&(id, LeafKind::Trainable)) => Ok(id),
            Some((_, kind)) => Err(Error::contract(format!(
                "`{name}` is a {kind:?} leaf and cannot be differentiated"
            ))),
            None => Err(Error::contract(format!("no leaf named `{name}`"))),
        }
    }

    /// Gradients of the scalar `loss` with respect to the named trainable leaves.
    pub fn gradient(&self, loss: NodeId, wrt: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let ids = wrt
            .iter()
            .map(|n| self.check_trainable(n).map(|id| (n.to_string(), id)))
            .collect::<Result<Vec<_>>>()?;
        let grads = self.backward(loss)?;
        Ok(ids
            .into_iter()
            .map(|(name, id)| {
                let dims = self.nodes[id.0].dims.clone();
                let g = match &grads[id.0] {
                    Some(g) => g.iter().map(|&v| v as f32).collect(),
                    None => vec![0.0; numel(&dims)],
                };
                (name, Tensor::new(dims, g).expect("gradient dims mirror the leaf"))
            })
            .collect())
    }

    /// Gradients for every trainable leaf.
    pub fn gradient_all(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let names = self.trainable_names();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.gradient(loss, &refs)
    }

    fn backward(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        if numel(&self.nodes[loss.0].dims) != 1 {
            return Err(Error::contract(format!(
                "loss `{}` must be scalar, has dims {:?}",
                self.nodes[loss.0].label, self.nodes[loss.0].dims
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_dims = &node.dims;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = (self.dims(*a), self.dims(*b));
                let (n, k, m) = (da[0], da[1], db[1]);
                let (va, vb) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * vb[p * m + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..n {
                        for p in 0..k {
                            let aip = va[i * k + p];
                            for j in 0..m {
                                gb[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    self.accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(s, v)| *s += v));
                }
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(s, v)| *s += v));
                let w = self.dims(*r)[0];
                self.accumulate(grads, *r, |gr| {
                    for (i, v) in g.iter().enumerate() {
                        gr[i % w] += v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(s, v)| *s += v * f));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out_dims, *axis);
                let total = out_dims[*axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.dims(p)[*axis];
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for k in 0..len * inner {
                                gp[dst + k] += g[src + k];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(out_dims, *axis);
                let src_axis = self.dims(*x)[*axis];
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let base = (o * src_axis + start) * inner;
                        for k in 0..len * inner {
                            gx[base + k] += g[o * len * inner + k];
                        }
                    }
                });
            }
            Op::Softmax { x, temperature, .. } => {
                let w = out_dims[out_dims.len() - 1];
                let y = &node.value;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.len() / w {
                        let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let mut dot = 0.0;
                        for j in 0..w {
                            dot += yr[j] * gr[j];
                        }
                        for j in 0..w {
                            gx[r * w + j] += yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let w = out_dims[out_dims.len() - 1];
                let (vx, vg) = (self.val(*x), self.val(*gamma));
                let rows = vx.len() / w;
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let row = &vx[r * w..(r + 1) * w];
                        let (mu, inv) = row_stats(row);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_xh = 0.0;
                        for j in 0..w {
                            let dh = g[r * w + j] * vg[j];
                            mean_dh += dh;
                            mean_dh_xh += dh * (row[j] - mu) * inv;
                        }
                        mean_dh /= w as f64;
                        mean_dh_xh /= w as f64;
                        for j in 0..w {
                            let xh = (row[j] - mu) * inv;
                            let dh = g[r * w + j] * vg[j];
                            gx[r * w + j] += inv * (dh - mean_dh - xh * mean_dh_xh);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for r in 0..rows {
                        let row = &vx[r * w..(r + 1) * w];
                        let (mu, inv) = row_stats(row);
                        for j in 0..w {
                            gg[j] += g[r * w + j] * (row[j] - mu) * inv;
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for r in 0..rows {
                        for j in 0..w {
                            gb[j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(vx[i]);
                    }
                });
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(self.dims(*x), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                gx[(o * len + k) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let d = self.dims(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..d[0] {
                        for j in 0..d[1] {
                            gx[i * d[1] + j] += g[j * d[0] + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(s, v)| *s += v));
            }
            Op::Resize { x } => {
                let d = self.dims(*x);
                let (c, h, w) = (d[0], d[1], d[2]);
                let (oh, ow) = (out_dims[1], out_dims[2]);
                let ys = axis_taps(h, oh);
                let xs = axis_taps(w, ow);
                self.accumulate(grads, *x, |gx| {
                    for ch in 0..c {
                        let base = ch * h * w;
                        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                gx[base + y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                                gx[base + y0 * w + x1] += gv * (1.0 - ly) * lx;
                                gx[base + y1 * w + x0] += gv * ly * (1.0 - lx);
                                gx[base + y1 * w + x1] += gv * ly * lx;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let c = self.dims(*logits)[1];
                let v = self.val(*logits);
                let scale = g[0] / targets.len() as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &v[r * c..(r + 1) * c];
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }

    // ------------------------------------------------------- leaf access

    pub fn leaf_value(&self, name: &str) -> Result<Tensor> {
        let id = self.leaf(name).ok_or_else(|| Error::contract(format!("no leaf named `{name}`")))?;
        Ok(self.value(id))
    }

    pub(crate) fn leaf_buffer_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        let id = self.check_trainable(name)?;
        Ok(&mut self.nodes[id.0].value)
    }

    /// Names of all leaves whose value reaches `node`.
    pub fn leaves_reaching(&self, node: NodeId) -> BTreeSet<String> {
        let mut live = vec![false; node.0 + 1];
        live[node.0] = true;
        for i in (0..=node.0).rev() {
            if live[i] {
                for inp in self.nodes[i].op.inputs() {
                    live[inp.0] = true;
                }
            }
        }
        self.leaves
            .iter()
            .filter(|(_, (id, _))| id.0 <= node.0 && live[id.0])
            .map(|(n, _)| n.clone())
            .collect()
    }
}

fn relabel(e: Error, label: &str) -> Error {
    match e {
        Error::Shape { message, .. } => Error::Shape { at: label.to_string(), message },
        Error::Numeric { message, .. } => Error::Numeric { at: label.to_string(), message },
        other => other,
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                row[j] += aip * brow[j];
            }
        }
    }
    out
}

/// Mean and reciprocal standard deviation (biased variance plus `LN_EPS`).
fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut mu = 0.0;
    for &v in row {
        mu += v;
    }
    mu /= n;
    let mut var = 0.0;
    for &v in row {
        var += (v - mu) * (v - mu);
    }
    var /= n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &v in row {
        s += (v - m).exp();
    }
    m + s.ln()
}

pub(crate) fn softmax_rows(x: &[f64], w: usize, temperature: f64, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / w {
        let row = &x[r * w..(r + 1) * w];
        let keep = |j: usize| mask.is_none_or(|m| m[r * w + j]);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..w {
            if keep(j) {
                mx = mx.max(row[j] / temperature);
            }
        }
        let mut s = 0.0;
        for j in 0..w {
            if keep(j) {
                let e = (row[j] / temperature - mx).exp();
                out[r * w + j] = e;
                s += e;
            }
        }
        for j in 0..w {
            out[r * w + j] /= s;
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Per output index along one axis: the two source taps and the weight of
/// the second, using half-pixel centres clamped to the source extent.
pub(crate) fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let lambda = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

/// Bilinear resize of `c` stacked `h x w` planes. Each tap pair is combined
/// as `a + t * (b - a)`, so constant planes and same-size resizes are exact.
pub(crate) fn bilinear_resize(src: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ys = axis_taps(h, oh);
    let xs = axis_taps(w, ow);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = plane[y0 * w + x0] + lx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                let bot = plane[y1 * w + x0] + lx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                out.push(top + ly * (bot - top));
            }
        }
    }
    out
}

/// Bilinear (half-pixel) resize of a `[C, h, w]` tensor.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let d = t.dims();
    if d.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize", format!("{d:?} -> {out_h}x{out_w}")));
    }
    let src: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    let out = bilinear_resize(&src, d[0], d[1], d[2], out_h, out_w);
    Tensor::new(vec![d[0], out_h, out_w], out.into_iter().map(|v| v as f32).collect())
}
