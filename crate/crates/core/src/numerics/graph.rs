use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};

use super::tensor::{check_permutation, invert_permutation};
use super::{sigmoid, silu, softplus, Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Softplus,
    Silu,
    Sigmoid,
    Neg,
    Reciprocal,
}

/// How the right operand of a binary op is stretched over the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// rhs is a single row (`[C]` or `[1, C]`) repeated over every row
    Row,
    /// rhs is a single column `[R, 1]` repeated over every column
    Col,
    /// rhs holds one element
    Scalar,
}

/// A differentiable op whose forward value is computed by the caller and
/// whose vector-Jacobian product is supplied here.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, `None` meaning zero.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Unary(Unary, NodeId),
    Scale(NodeId, T),
    Rows(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    MeanRows(NodeId),
    GroupMax(NodeId, Vec<usize>),
    WeightedRows {
        x: NodeId,
        index: Vec<usize>,
        weight: Vec<T>,
        k: usize,
    },
    RmsNorm {
        x: NodeId,
        w: NodeId,
        inv_rms: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Custom(Vec<NodeId>, Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed ops in topological order; [`Graph::backward`] walks the
/// record in reverse, visiting every node once.
///
/// A graph is single-use: build it, call `backward` once, read gradients.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter as a tracked leaf; repeated calls for the
    /// same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.variable(store.get(id).clone());
        self.params.insert(id, n);
        n
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter, ordered by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(&pid, &node)| {
                let g = self
                    .grad(node)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(node).shape().to_vec()));
                (pid, g)
            })
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    fn broadcast_kind(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if sb.iter().product::<usize>() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if let [r, c] = *sa {
            if sb == [c] || sb == [1, c] {
                return Ok(Broadcast::Row);
            }
            if sb == [r, 1] {
                return Ok(Broadcast::Col);
            }
        }
        Err(shape_err(op, sa, sb))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Broadcast)> {
        let bc = self.broadcast_kind(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.row_len().max(1);
        let rhs = |i: usize| match bc {
            Broadcast::Same => vb.data()[i],
            Broadcast::Row => vb.data()[i % cols],
            Broadcast::Col => vb.data()[i / cols],
            Broadcast::Scalar => vb.data()[0],
        };
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, rhs(i)))
            .collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, bc))
    }

    /// `a + b`, with `b` broadcast per [`Broadcast`].
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, bc) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b, bc), rg))
    }

    /// `a ⊙ b`, with `b` broadcast per [`Broadcast`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, bc) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn unary(&mut self, kind: Unary, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if kind == Unary::Reciprocal && vx.data().iter().any(|v| v.is_zero()) {
            return Err(Error::Domain("reciprocal of zero".into()));
        }
        let v = vx.map(match kind {
            Unary::Exp => |v: T| v.exp(),
            Unary::Softplus => softplus,
            Unary::Silu => silu,
            Unary::Sigmoid => sigmoid,
            Unary::Neg => |v: T| -v,
            Unary::Reciprocal => |v: T| v.recip(),
        });
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Unary(kind, x), rg))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Softplus, x)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Silu, x)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Neg, x)
    }

    pub fn reciprocal(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Reciprocal, x)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    /// Reorders rows: row `i` of the result is row `perm[i]` of `x`.
    pub fn gather_rows(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        check_permutation(perm, self.value(x).rows())?;
        self.select_rows(x, perm)
    }

    /// Inverse of [`Graph::gather_rows`] for the same `perm`.
    pub fn scatter_rows(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        check_permutation(perm, self.value(x).rows())?;
        self.select_rows(x, &invert_permutation(perm))
    }

    /// Reverses row order.
    pub fn flip_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).rows();
        let rev: Vec<usize> = (0..n).rev().collect();
        self.select_rows(x, &rev)
    }

    /// Row selection with repetition; the gradient scatter-adds.
    pub fn select_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let n = vx.rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {bad} out of range for {n} rows")));
        }
        let v = vx.select_rows(index);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Rows(x, index.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(shape_err(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if start > end || end > cols {
            return Err(Error::Index(format!("columns {start}..{end} of {cols}")));
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..end]);
        }
        let v = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceCols(x, start, end), rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let cols = self.value(*first).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(shape_err(
                    "concat_rows",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if start > end || end > rows {
            return Err(Error::Index(format!("rows {start}..{end} of {rows}")));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let v = Tensor::new(vec![end - start, cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceRows(x, start, end), rg))
    }

    /// Column means, shape `[1, C]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if rows == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let vx = self.value(x);
        let inv = T::one() / T::of(rows as f64);
        let mut data = vec![T::zero(); cols];
        for r in 0..rows {
            for (acc, &v) in data.iter_mut().zip(vx.row(r)) {
                *acc = *acc + v;
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        let v = Tensor::new(vec![1, cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MeanRows(x), rg))
    }

    /// Channel-wise max over consecutive groups of `k` rows: `[M·k, C] → [M, C]`.
    /// Ties resolve to the first row of the group.
    pub fn group_max(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if k == 0 || rows % k != 0 {
            return Err(Error::Contract(format!(
                "{rows} rows not divisible into groups of {k}"
            )));
        }
        let m = rows / k;
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(m * cols);
        let mut arg = Vec::with_capacity(m * cols);
        for g in 0..m {
            for c in 0..cols {
                let mut best = g * k;
                for r in g * k + 1..(g + 1) * k {
                    if vx[r * cols + c] > vx[best * cols + c] {
                        best = r;
                    }
                }
                data.push(vx[best * cols + c]);
                arg.push(best * cols + c);
            }
        }
        let v = Tensor::new(vec![m, cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GroupMax(x, arg), rg))
    }

    /// `out[i] = Σ_j weight[i·k + j] · x[index[i·k + j]]` with constant weights.
    pub fn weighted_rows(
        &mut self,
        x: NodeId,
        index: &[usize],
        weight: &[T],
        k: usize,
    ) -> Result<NodeId> {
        if k == 0 || index.len() != weight.len() || !index.len().is_multiple_of(k) {
            return Err(Error::Contract(format!(
                "weighted_rows: {} indices, {} weights, k = {k}",
                index.len(),
                weight.len()
            )));
        }
        let vx = self.value(x);
        let n = vx.rows();
        let cols = vx.row_len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {bad} out of range for {n} rows")));
        }
        let m = index.len() / k;
        let mut data = vec![T::zero(); m * cols];
        for (slot, (&src, &w)) in index.iter().zip(weight).enumerate() {
            let out = &mut data[(slot / k) * cols..(slot / k + 1) * cols];
            for (o, &v) in out.iter_mut().zip(vx.row(src)) {
                *o = *o + w * v;
            }
        }
        let v = Tensor::new(vec![m, cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::WeightedRows {
                x,
                index: index.to_vec(),
                weight: weight.to_vec(),
                k,
            },
            rg,
        ))
    }

    /// Row-wise RMS normalisation with a learned per-channel gain.
    pub fn rms_norm(&mut self, x: NodeId, w: NodeId, eps: T) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(w).numel() != cols {
            return Err(shape_err(
                "rms_norm",
                self.value(x).shape(),
                self.value(w).shape(),
            ));
        }
        let vx = self.value(x);
        let vw = self.value(w).data();
        let mut inv_rms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = vx.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(cols as f64);
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(vw).map(|(&v, &g)| v * inv * g));
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(v, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let v = Tensor::scalar(self.value(x).sum() / T::of(n as f64));
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Mean(x), rg))
    }

    /// Mean over rows of `-log softmax(logits[r])[labels[r]]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.value(logits).dims2()?;
        if labels.len() != rows || rows == 0 {
            return Err(Error::Contract(format!(
                "{} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Index(format!("label {bad} for {cols} classes")));
        }
        let vz = self.value(logits);
        let mut probs = Vec::with_capacity(rows * cols);
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = vz.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            loss = loss - (row[label] - max - log_denom);
            probs.extend(row.iter().map(|&v| (v - max).exp() / denom));
        }
        let v = Tensor::scalar(loss / T::of(rows as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Records a custom op whose forward `value` the caller already computed.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> NodeId {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Populates gradients of the scalar `loss` with respect to every
    /// tracked node recorded before it.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.vjp(i, &g)?;
            self.grads[i] = Some(g);
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.1;
                if rg(*a) {
                    let mut da = Tensor::zeros(vec![m, k]);
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        val(*b).data(),
                        true,
                        da.data_mut(),
                        false,
                    );
                    out.push((*a, da));
                }
                if rg(*b) {
                    let mut db = Tensor::zeros(vec![k, n]);
                    T::gemm(
                        k,
                        m,
                        n,
                        val(*a).data(),
                        true,
                        g.data(),
                        false,
                        db.data_mut(),
                        false,
                    );
                    out.push((*b, db));
                }
            }
            Op::Add(a, b, bc) => {
                if rg(*a) {
                    out.push((*a, g.clone()));
                }
                if rg(*b) {
                    out.push((*b, reduce_broadcast(g, *bc, val(*b).shape())));
                }
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let cols = va.row_len().max(1);
                let rhs = |j: usize| match bc {
                    Broadcast::Same => vb.data()[j],
                    Broadcast::Row => vb.data()[j % cols],
                    Broadcast::Col => vb.data()[j / cols],
                    Broadcast::Scalar => vb.data()[0],
                };
                if rg(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * rhs(j))
                        .collect();
                    out.push((*a, Tensor::new(va.shape().to_vec(), data)?));
                }
                if rg(*b) {
                    let prod = Tensor::new(
                        va.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data())
                            .map(|(&gv, &av)| gv * av)
                            .collect(),
                    )?;
                    out.push((*b, reduce_broadcast(&prod, *bc, vb.shape())));
                }
            }
            Op::Unary(kind, x) => {
                let vx = val(*x);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data().iter().zip(y.data()))
                    .map(|(&gv, (&xv, &yv))| {
                        gv * match kind {
                            Unary::Exp => yv,
                            Unary::Softplus => sigmoid(xv),
                            Unary::Silu => {
                                let s = sigmoid(xv);
                                s * (T::one() + xv * (T::one() - s))
                            }
                            Unary::Sigmoid => yv * (T::one() - yv),
                            Unary::Neg => -T::one(),
                            Unary::Reciprocal => -(yv * yv),
                        }
                    })
                    .collect();
                out.push((*x, Tensor::new(vx.shape().to_vec(), data)?));
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * *c))),
            Op::Rows(x, index) => {
                let vx = val(*x);
                let w = vx.row_len();
                let mut dx = Tensor::zeros(vx.shape().to_vec());
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut dx.data_mut()[src * w..(src + 1) * w];
                    for (d, &gv) in dst.iter_mut().zip(g.row(r)) {
                        *d = *d + gv;
                    }
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).dims2()?.1;
                    if rg(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        out.push((p, Tensor::new(vec![rows, c], data)?));
                    }
                    offset += c;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (rows, cols) = val(*x).dims2()?;
                let w = end - start;
                let mut dx = Tensor::zeros(vec![rows, cols]);
                for r in 0..rows {
                    dx.data_mut()[r * cols + start..r * cols + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                out.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if rg(p) {
                        let data = g.data()[offset..offset + n].to_vec();
                        out.push((p, Tensor::new(val(p).shape().to_vec(), data)?));
                    }
                    offset += n;
                }
            }
            Op::SliceRows(x, start, end) => {
                let (_, cols) = val(*x).dims2()?;
                let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                dx.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
                out.push((*x, dx));
            }
            Op::MeanRows(x) => {
                let (rows, cols) = val(*x).dims2()?;
                let inv = T::one() / T::of(rows as f64);
                let dx = Tensor::from_fn(vec![rows, cols], |j| g.data()[j % cols] * inv);
                out.push((*x, dx));
            }
            Op::GroupMax(x, arg) => {
                let mut dx = Tensor::zeros(val(*x).shape().to_vec());
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    dx.data_mut()[src] = dx.data_mut()[src] + gv;
                }
                out.push((*x, dx));
            }
            Op::WeightedRows {
                x,
                index,
                weight,
                k,
            } => {
                let vx = val(*x);
                let w = vx.row_len();
                let mut dx = Tensor::zeros(vx.shape().to_vec());
                for (slot, (&src, &wt)) in index.iter().zip(weight).enumerate() {
                    let grow = g.row(slot / k);
                    let dst = &mut dx.data_mut()[src * w..(src + 1) * w];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d = *d + wt * gv;
                    }
                }
                out.push((*x, dx));
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let vx = val(*x);
                let vw = val(*w).data();
                let (rows, cols) = vx.dims2()?;
                let mut dx = Tensor::zeros(vec![rows, cols]);
                let mut dw = vec![T::zero(); cols];
                let inv_c = T::one() / T::of(cols as f64);
                for r in 0..rows {
                    let (xr, gr, ir) = (vx.row(r), g.row(r), inv_rms[r]);
                    let dot: T = (0..cols).map(|c| gr[c] * vw[c] * xr[c]).sum();
                    let coef = dot * ir * ir * ir * inv_c;
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = gr[c] * vw[c] * ir - xr[c] * coef;
                        dw[c] = dw[c] + gr[c] * xr[c] * ir;
                    }
                }
                if rg(*x) {
                    out.push((*x, dx));
                }
                if rg(*w) {
                    out.push((*w, Tensor::new(val(*w).shape().to_vec(), dw)?));
                }
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]))),
            Op::Mean(x) => {
                let n = T::of(val(*x).numel() as f64);
                out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0] / n)));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (rows, cols) = val(*logits).dims2()?;
                let scale = g.data()[0] / T::of(rows as f64);
                let mut dz = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dz[r * cols + l] = dz[r * cols + l] - T::one();
                }
                dz.iter_mut().for_each(|v| *v = *v * scale);
                out.push((*logits, Tensor::new(vec![rows, cols], dz)?));
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&id| val(id)).collect();
                let grads = op.backward(&vals, &node.value, g);
                if grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&id, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if gi.shape() != val(id).shape() {
                            return Err(shape_err(op.name(), val(id).shape(), gi.shape()));
                        }
                        out.push((id, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn reduce_broadcast<T: Scalar>(g: &Tensor<T>, bc: Broadcast, shape: &[usize]) -> Tensor<T> {
    let cols = g.row_len().max(1);
    let mut acc = Tensor::zeros(shape.to_vec());
    let target = acc.data_mut();
    for (j, &gv) in g.data().iter().enumerate() {
        let t = match bc {
            Broadcast::Same => j,
            Broadcast::Row => j % cols,
            Broadcast::Col => j / cols,
            Broadcast::Scalar => 0,
        };
        target[t] = target[t] + gv;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
    }

    /// Compares tape gradients of `f` against central differences at `inputs`.
    fn check<F>(inputs: &[Tensor<f64>], f: F)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &ids).unwrap();
        g.backward(loss).unwrap();
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let ids: Vec<_> = ins.iter().map(|t| g.variable(t.clone())).collect();
            let l = f(&mut g, &ids).unwrap();
            g.value(l).data()[0]
        };
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = g
                .grad(ids[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-6, "input {k} entry {j}: tape {a} vs fd {numeric}");
            }
        }
    }

    #[test]
    fn matmul_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = [
            random(&[3, 4], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[2], &mut rng),
        ];
        check(&ins, |g, x| {
            let y = g.matmul(x[0], x[1])?;
            let y = g.add(y, x[2])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        });
    }

    #[test]
    fn unary_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [
            Unary::Exp,
            Unary::Softplus,
            Unary::Silu,
            Unary::Sigmoid,
            Unary::Neg,
        ] {
            let ins = [random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)];
            check(&ins, |g, x| {
                let y = g.unary(kind, x[0])?;
                let y = g.mul(y, x[1])?;
                Ok(g.sum(y))
            });
        }
        let ins = [Tensor::from_fn(vec![2, 3], |i| 0.5 + i as f64)];
        check(&ins, |g, x| {
            let y = g.reciprocal(x[0])?;
            Ok(g.sum(y))
        });
    }

    #[test]
    fn row_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = [
            random(&[4, 3], &mut rng),
            random(&[4, 3], &mut rng),
            random(&[4, 1], &mut rng),
        ];
        check(&ins, |g, x| {
            let p = g.gather_rows(x[0], &[2, 0, 3, 1])?;
            let s = g.select_rows(x[0], &[1, 1, 0])?;
            let c = g.concat_cols(&[p, x[1]])?;
            let c = g.mul(c, c)?;
            let sl = g.slice_cols(c, 1, 5)?;
            let r = g.concat_rows(&[sl, sl])?;
            let r = g.slice_rows(r, 2, 6)?;
            let m = g.mean_rows(r)?;
            let col = g.mul(x[1], x[2])?;
            let s2 = g.mul(s, s)?;
            let a = g.sum(m);
            let b = g.sum(col);
            let c2 = g.sum(s2);
            let ab = g.add(a, b)?;
            g.add(ab, c2)
        });
    }

    #[test]
    fn gather_gradient_is_scatter() {
        let x = Tensor::from_fn(vec![3, 2], |i| i as f64);
        let mut g = Graph::new();
        let xi = g.variable(x);
        let y = g.gather_rows(xi, &[2, 0, 1]).unwrap();
        let w = g.constant(Tensor::from_fn(vec![3, 2], |i| (10 * i) as f64));
        let l = g.mul(y, w).unwrap();
        let l = g.sum(l);
        g.backward(l).unwrap();
        let upstream = Tensor::from_fn(vec![3, 2], |i| (10 * i) as f64);
        assert_eq!(
            g.grad(xi).unwrap(),
            &upstream.scatter_rows(&[2, 0, 1]).unwrap()
        );
    }

    #[test]
    fn pooling_norm_and_loss_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = [
            random(&[6, 3], &mut rng),
            Tensor::from_fn(vec![3], |i| 0.5 + i as f64),
        ];
        check(&ins, |g, x| {
            let n = g.rms_norm(x[0], x[1], 1e-6)?;
            let p = g.group_max(n, 3)?;
            let w = g.weighted_rows(n, &[0, 5, 2, 2], &[0.25, 0.75, 0.5, 0.5], 2)?;
            let cat = g.concat_rows(&[p, w])?;
            g.cross_entropy(cat, &[0, 2, 1, 1])
        });
        check(&ins[..1], |g, x| g.mean(x[0]));
    }

    #[test]
    fn sum_of_weighted_input() {
        let w = Tensor::from_fn(vec![2, 2], |i| i as f64 + 1.0);
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(vec![2, 2]));
        let wc = g.constant(w.clone());
        let y = g.mul(wc, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &w);
    }

    #[test]
    fn softplus_grad_is_sigmoid() {
        let x = Tensor::from_fn(vec![5], |i| i as f64 - 2.0);
        let mut g = Graph::new();
        let xi = g.variable(x.clone());
        let y = g.softplus(xi).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let expect = x.map(sigmoid);
        assert!(g.grad(xi).unwrap().max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reciprocal_of_zero_is_domain_error() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(vec![2]));
        assert!(matches!(g.reciprocal(x), Err(Error::Domain(_))));
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::zeros(vec![2, 3]));
        let b = g.variable(Tensor::zeros(vec![3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(g.matmul(a, a).is_err());
    }
}
