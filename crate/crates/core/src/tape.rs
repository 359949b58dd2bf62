//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops are recorded in construction order, which is already a topological
//! order, so the backward pass is a single reverse sweep that visits each
//! node exactly once. A tape belongs to one thread for its lifetime; the
//! recorded values themselves are immutable once written.

use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    Gelu { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    SoftmaxRows { a: NodeId },
    Embed { table: NodeId, ids: Vec<usize> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, end: usize },
    SliceRows { a: NodeId, start: usize, end: usize },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

/// Wengert tape recording tensor ops for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::MatMulNT { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = tensor::add_row(self.value(a), self.value(row))?;
        Ok(self.push_op(v, Op::AddRow { a, row }, &[a, row]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let v = tensor::scale(self.value(a), c);
        self.push_op(v, Op::Scale { a, c }, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = tensor::gelu(self.value(a));
        self.push_op(v, Op::Gelu { a }, &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push_op(v, Op::LayerNorm { x, gain, bias }, &[x, gain, bias]))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(a))?;
        Ok(self.push_op(v, Op::SoftmaxRows { a }, &[a]))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = tensor::lookup_rows(self.value(table), ids)?;
        Ok(self.push_op(v, Op::Embed { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = tensor::concat_cols(&tensors)?;
        Ok(self.push_op(v, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = tensor::slice_cols(self.value(a), start, end)?;
        Ok(self.push_op(v, Op::SliceCols { a, start, end }, &[a]))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = tensor::slice_rows(self.value(a), start, end)?;
        Ok(self.push_op(v, Op::SliceRows { a, start, end }, &[a]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(tensor::sum_all(self.value(a)) as f32);
        self.push_op(v, Op::SumAll { a }, &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(tensor::mean_all(self.value(a)) as f32);
        self.push_op(v, Op::MeanAll { a }, &[a])
    }

    /// Mean next-token cross-entropy; row t of `logits` scores `targets[t]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let v = Tensor::scalar(tensor::cross_entropy(self.value(logits), targets)? as f32);
        Ok(self.push_op(v, Op::CrossEntropy { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`. Calling it a second time without
    /// [`Tape::reset_backward`] is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset_backward first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let out_grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &out_grad, &mut grads)?;
            grads[i] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }

    /// Allow another backward pass over the same recorded forward.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    fn accumulate_parents(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                // c = a·b: da = g·bᵀ, db = aᵀ·g
                if self.needs(*a) {
                    let da = tensor::matmul_nt(g, self.value(*b))?;
                    add_into(grads, *a, da, self.value(*a).shape());
                }
                if self.needs(*b) {
                    let db = matmul_tn(self.value(*a), g)?;
                    add_into(grads, *b, db, self.value(*b).shape());
                }
            }
            Op::MatMulNT { a, b } => {
                // c = a·bᵀ: da = g·b, db = gᵀ·a
                if self.needs(*a) {
                    let da = tensor::matmul(g, self.value(*b))?;
                    add_into(grads, *a, da, self.value(*a).shape());
                }
                if self.needs(*b) {
                    let db = matmul_tn(g, self.value(*a))?;
                    add_into(grads, *b, db, self.value(*b).shape());
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(grads, *a, g.clone(), self.value(*a).shape());
                }
                if self.needs(*b) {
                    add_into(grads, *b, g.clone(), self.value(*b).shape());
                }
            }
            Op::AddRow { a, row } => {
                if self.needs(*a) {
                    add_into(grads, *a, g.clone(), self.value(*a).shape());
                }
                if self.needs(*row) {
                    let (m, n) = g.dims2()?;
                    let mut col_sum = vec![0.0f32; n];
                    for i in 0..m {
                        for j in 0..n {
                            col_sum[j] += g.row(i)[j];
                        }
                    }
                    add_into(grads, *row, Tensor::new(vec![n], col_sum)?, self.value(*row).shape());
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da = tensor::mul(g, self.value(*b))?;
                    add_into(grads, *a, da, self.value(*a).shape());
                }
                if self.needs(*b) {
                    let db = tensor::mul(g, self.value(*a))?;
                    add_into(grads, *b, db, self.value(*b).shape());
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    add_into(grads, *a, tensor::scale(g, *c), self.value(*a).shape());
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * tensor::gelu_grad_scalar(xv))
                        .collect();
                    add_into(grads, *a, Tensor::new(x.shape().to_vec(), data)?, x.shape());
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                self.layer_norm_backward(*x, *gain, *bias, g, grads)?;
            }
            Op::SoftmaxRows { a } => {
                if self.needs(*a) {
                    let y = &node.value;
                    let (m, n) = y.dims2()?;
                    let mut dx = vec![0.0f32; m * n];
                    for i in 0..m {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let mut dot = 0.0f64;
                        for j in 0..n {
                            dot += f64::from(yr[j]) * f64::from(gr[j]);
                        }
                        for j in 0..n {
                            dx[i * n + j] =
                                (f64::from(yr[j]) * (f64::from(gr[j]) - dot)) as f32;
                        }
                    }
                    add_into(grads, *a, Tensor::new(vec![m, n], dx)?, self.value(*a).shape());
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let t = self.value(*table);
                    let (_, n) = t.dims2()?;
                    let mut dt = Tensor::zeros(t.shape());
                    // Scatter-add in index order: deterministic.
                    for (i, &id) in ids.iter().enumerate() {
                        let src = g.row(i);
                        let dst = dt.row_mut(id);
                        for j in 0..n {
                            dst[j] += src[j];
                        }
                    }
                    add_into(grads, *table, dt, t.shape());
                }
            }
            Op::ConcatCols { parts } => {
                let mut start = 0;
                for p in parts {
                    let (m, w) = self.value(*p).dims2()?;
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g.row(i)[start..start + w]);
                        }
                        add_into(grads, *p, Tensor::new(vec![m, w], dp)?, self.value(*p).shape());
                    }
                    start += w;
                }
            }
            Op::SliceCols { a, start, end } => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).dims2()?;
                    let mut da = Tensor::zeros(&[m, n]);
                    for i in 0..m {
                        da.row_mut(i)[*start..*end].copy_from_slice(g.row(i));
                    }
                    add_into(grads, *a, da, self.value(*a).shape());
                }
            }
            Op::SliceRows { a, start, end } => {
                if self.needs(*a) {
                    let (m, n) = self.value(*a).dims2()?;
                    let mut da = Tensor::zeros(&[m, n]);
                    da.data_mut()[start * n..end * n].copy_from_slice(g.data());
                    add_into(grads, *a, da, self.value(*a).shape());
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let da = Tensor::full(self.value(*a).shape(), g.scalar_value());
                    add_into(grads, *a, da, self.value(*a).shape());
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let n = self.value(*a).numel() as f32;
                    let da = Tensor::full(self.value(*a).shape(), g.scalar_value() / n);
                    add_into(grads, *a, da, self.value(*a).shape());
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let l = self.value(*logits);
                    let (t, v) = l.dims2()?;
                    let gscale = g.scalar_value() / t as f32;
                    let mut dl = vec![0.0f32; t * v];
                    let mut probs = vec![0.0f32; v];
                    for (i, &tok) in targets.iter().enumerate() {
                        tensor::softmax_row_into(l.row(i), &mut probs);
                        for j in 0..v {
                            let onehot = if j == tok as usize { 1.0 } else { 0.0 };
                            dl[i * v + j] = gscale * (probs[j] - onehot);
                        }
                    }
                    add_into(grads, *logits, Tensor::new(vec![t, v], dl)?, l.shape());
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn layer_norm_backward(
        &self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let (m, n) = xv.dims2()?;

        let mut dx = vec![0.0f32; m * n];
        let mut dgain = vec![0.0f32; n];
        let mut dbias = vec![0.0f32; n];

        for i in 0..m {
            let row = xv.row(i);
            let grow = g.row(i);
            let (mean, rstd) = tensor::row_moments(row);

            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                let dxhat = f64::from(grow[j]) * f64::from(gv.data()[j]);
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * f64::from(xhat);
                dgain[j] += grow[j] * xhat;
                dbias[j] += grow[j];
            }
            let inv_n = 1.0 / n as f64;
            for j in 0..n {
                let xhat = f64::from((row[j] - mean) * rstd);
                let dxhat = f64::from(grow[j]) * f64::from(gv.data()[j]);
                dx[i * n + j] = (f64::from(rstd)
                    * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n))
                    as f32;
            }
        }

        if self.needs(x) {
            add_into(grads, x, Tensor::new(vec![m, n], dx)?, xv.shape());
        }
        if self.needs(gain) {
            add_into(grads, gain, Tensor::new(vec![n], dgain)?, gv.shape());
        }
        if self.needs(bias) {
            add_into(grads, bias, Tensor::new(vec![n], dbias)?, self.value(bias).shape());
        }
        Ok(())
    }
}

/// `t·gᵀ` pattern: `aᵀ·b` for a[m×k], b[m×n] -> [k×n].
fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (m2, n) = b.dims2()?;
    debug_assert_eq!(m, m2);
    let mut out = vec![0.0f32; k * n];
    for p in 0..k {
        for j in 0..n {
            let mut acc = 0.0f64;
            for i in 0..m {
                acc += f64::from(a.data()[i * k + p]) * f64::from(b.data()[i * n + j]);
            }
            out[p * n + j] = acc as f32;
        }
    }
    Tensor::new(vec![k, n], out)
}

fn add_into(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor, shape: &[usize]) {
    debug_assert_eq!(delta.shape(), shape);
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
