//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its forward value and records the ids of its inputs, so insertion
//! order is a valid topological order and [`Graph::backward`] is a single
//! reverse sweep. The graph is meant to be rebuilt for every training step.
//!
//! Binary elementwise ops broadcast numpy-style: shapes are right-aligned and
//! each dimension pair must be equal or contain a 1.

use crate::error::{Error, Result};

/// Dense row-major array of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a `[rows × cols]` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Constructor for op results; finiteness is the caller's concern.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of rows of a rank-2 tensor (the leading dimension otherwise).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Selects rows by index from a rank-2 tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape = vec![idx.len(), 1];
        } else {
            shape[0] = idx.len();
        }
        Tensor::raw(shape, data)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis(NodeId, usize),
    MaxAxis(NodeId, Vec<usize>),
    Transpose(NodeId),
    Concat(Vec<NodeId>, usize),
    Reshape(NodeId),
    GradReverse(NodeId, f64),
    Dropout(NodeId, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when unreachable.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => Tensor::raw(self.shapes[id.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// `None` when no path connects `id` to the loss.
    pub fn get_opt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

// ---------------------------------------------------------------------------
// shape helpers

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let rank = a.len().max(b.len());
    let pa = pad_shape(a, rank);
    let pb = pad_shape(b, rank);
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            }),
        })
        .collect()
}

fn pad_shape(s: &[usize], rank: usize) -> Vec<usize> {
    let mut p = vec![1; rank - s.len()];
    p.extend_from_slice(s);
    p
}

/// Maps every flat index of `out` to the flat index of `input` under broadcasting.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n_out: usize = out.iter().product();
    let n_in: usize = input.iter().product();
    if out == input {
        return (0..n_out).collect();
    }
    if n_in == 1 {
        return vec![0; n_out];
    }
    let rank = out.len();
    let input = pad_shape(input, rank);
    let mut in_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        in_strides[d] = if input[d] == 1 { 0 } else { acc };
        acc *= input[d];
    }
    let mut map = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; rank];
    for _ in 0..n_out {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Sums a gradient over the broadcast dimensions back onto `input`'s shape.
fn reduce_to(grad: &[f64], map: &[usize], n_in: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_in];
    for (g, &j) in grad.iter().zip(map) {
        out[j] += g;
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::raw(vec![m, n], data), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let ma = broadcast_map(&out_shape, self.shape(a));
        let mb = broadcast_map(&out_shape, self.shape(b));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok(self.push(op, Tensor::raw(out_shape, data), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise division; callers guarantee a non-zero divisor.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let shape = v.shape().to_vec();
        self.push(op, Tensor::raw(shape, data), &[x])
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; operands must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `log(sigmoid(x))` evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::raw(vec![], vec![s]), &[x])
    }

    /// Mean of all elements. An empty operand is an error.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Op::MeanAll(x), Tensor::raw(vec![], vec![m]), &[x]))
    }

    fn check_axis(&self, op: &'static str, x: NodeId, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    /// Sums along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.sum_axis_impl(x, axis, false)
    }

    /// Sums along `axis`, keeping it with length 1.
    pub fn sum_axis_keep(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.sum_axis_impl(x, axis, true)
    }

    fn sum_axis_impl(&mut self, x: NodeId, axis: usize, keep: bool) -> Result<NodeId> {
        self.check_axis("sum_axis", x, axis)?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v.data()[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        if keep {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(self.push(Op::SumAxis(x, axis), Tensor::raw(shape, out), &[x]))
    }

    /// Maximum along `axis` (kept with length 1). The gradient flows to the
    /// first maximal element.
    pub fn max_axis_keep(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.check_axis("max_axis", x, axis)?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        if len == 0 {
            return Err(Error::InvalidArgument("max over an empty axis".into()));
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    let dst = o * inner + i;
                    if v.data()[src] > out[dst] {
                        out[dst] = v.data()[src];
                        arg[dst] = src;
                    }
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        Ok(self.push(Op::MaxAxis(x, arg), Tensor::raw(shape, out), &[x]))
    }

    /// Maximum along `axis`, removing it from the shape.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let kept = self.max_axis_keep(x, axis)?;
        let mut shape = self.shape(kept).to_vec();
        shape.remove(axis);
        self.reshape(kept, shape)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let data = transpose_raw(self.value(x).data(), s[0], s[1]);
        Ok(self.push(Op::Transpose(x), Tensor::raw(vec![s[1], s[0]], data), &[x]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), Tensor::raw(shape, data), parts))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape,
            });
        }
        let data = v.data().to_vec();
        Ok(self.push(Op::Reshape(x), Tensor::raw(shape, data), &[x]))
    }

    /// Identity in the forward pass; multiplies the upstream gradient by
    /// `-lambda` in the backward pass.
    pub fn gradient_reversal(&mut self, x: NodeId, lambda: f64) -> Result<NodeId> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gradient reversal needs a finite lambda >= 0, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        Ok(self.push(Op::GradReverse(x, lambda), value, &[x]))
    }

    /// Multiplies `x` by a fixed mask (already scaled by `1 / keep_prob`).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                lhs: v.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape().to_vec();
        Ok(self.push(Op::Dropout(x, mask), Tensor::raw(shape, data), &[x]))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let mut acc = |id: NodeId, contrib: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose_raw(val(*b), k, n);
                acc(*a, matmul_raw(g, &bt, m, n, k));
                let at = transpose_raw(val(*a), m, k);
                acc(*b, matmul_raw(&at, g, k, m, n));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ma = broadcast_map(out_shape, self.shape(*a));
                acc(*a, reduce_to(g, &ma, val(*a).len()));
                let mb = broadcast_map(out_shape, self.shape(*b));
                let gb: Vec<f64> = g.iter().map(|v| sign * v).collect();
                acc(*b, reduce_to(&gb, &mb, val(*b).len()));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let ma = broadcast_map(out_shape, self.shape(*a));
                let mb = broadcast_map(out_shape, self.shape(*b));
                let (da, db) = (val(*a), val(*b));
                let is_div = matches!(node.op, Op::Div(..));
                let (ga, gb): (Vec<f64>, Vec<f64>) = g
                    .iter()
                    .zip(ma.iter().zip(&mb))
                    .map(|(gv, (&i, &j))| {
                        if is_div {
                            (gv / db[j], -gv * da[i] / (db[j] * db[j]))
                        } else {
                            (gv * db[j], gv * da[i])
                        }
                    })
                    .unzip();
                acc(*a, reduce_to(&ga, &ma, da.len()));
                acc(*b, reduce_to(&gb, &mb, db.len()));
            }
            Op::Neg(x) => acc(*x, g.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::Exp(_) | Op::Sqrt(_) | Op::Sigmoid(_) => {
                let x = match node.op {
                    Op::Exp(x) | Op::Sqrt(x) | Op::Sigmoid(x) => x,
                    _ => unreachable!(),
                };
                let y = node.value.data();
                let contrib = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| match node.op {
                        Op::Exp(_) => gv * yv,
                        Op::Sqrt(_) => gv / (2.0 * yv),
                        _ => gv * yv * (1.0 - yv),
                    })
                    .collect();
                acc(x, contrib);
            }
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(gv, xv)| gv / xv).collect()),
            Op::LogSigmoid(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gv, xv)| gv * sigmoid(-xv))
                    .collect(),
            ),
            Op::SumAll(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::MeanAll(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            out[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                acc(*x, out);
            }
            Op::MaxAxis(x, arg) => {
                let mut out = vec![0.0; val(*x).len()];
                for (gv, &src) in g.iter().zip(arg) {
                    out[src] += gv;
                }
                acc(*x, out);
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                acc(*x, transpose_raw(g, s[1], s[0]));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut out = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        out.extend_from_slice(&g[start..start + len * inner]);
                    }
                    acc(p, out);
                    offset += len;
                }
            }
            Op::GradReverse(x, lambda) => acc(*x, g.iter().map(|v| -lambda * v).collect()),
            Op::Dropout(x, mask) => acc(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
        }
    }
}

/// Compares analytic gradients of a scalar function of several inputs with
/// central finite differences. Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<_> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        g.value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(g.shape(out).to_vec()))
    };

    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for c in 0..probe[k].numel() {
            let orig = probe[k].data[c];
            probe[k].data[c] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data[c] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x0: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x0), eps)
}
