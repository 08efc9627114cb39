//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] owns an arena of tensor nodes and an ordered list of executed
//! ops. Forward methods (`matmul`, `layer_norm`, ...) compute the result
//! immediately and record what backward needs. The tape is rebuilt each
//! training step because gate patterns change per step; nothing is cached
//! across steps.
//!
//! Invariants:
//! - op inputs always precede the op (ids grow monotonically), so one
//!   reverse sweep visits every op exactly once;
//! - an op is recorded only when some input requires gradients, so a block
//!   that is bypassed contributes nothing to the tape;
//! - all kernels have fixed evaluation order: identical inputs give
//!   bitwise-identical outputs and gradients.

use crate::error::{Error, Result};
use crate::kernels::{gelu_grad_from_tanh, gelu_inner_tanh, matmul_acc, softmax_rows, transpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identity of a tensor within the active tape.
pub type NodeId = usize;

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    /// Keep this node's gradient after backward (leaves always do;
    /// interior nodes only when marked via [`Tape::retain_grad`]).
    retain_grad: bool,
}

#[derive(Debug)]
enum Op<T> {
    /// out = a · b, a: m×k, b: k×n
    MatMul {
        a: NodeId,
        b: NodeId,
        out: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// out = xᵀ (2-D)
    Transpose { x: NodeId, out: NodeId },
    /// out = a + b (same shape)
    Add { a: NodeId, b: NodeId, out: NodeId },
    /// out[r, c] = x[r, c] + bias[c]
    AddBias { x: NodeId, bias: NodeId, out: NodeId },
    /// out = a ⊙ b (same shape)
    Mul { a: NodeId, b: NodeId, out: NodeId },
    /// out = c · x
    Scale { x: NodeId, c: T, out: NodeId },
    /// out = gelu(x), elementwise (tanh approximation)
    Gelu {
        x: NodeId,
        out: NodeId,
        /// saved tanh of the inner polynomial, reused by backward
        saved_tanh: Vec<T>,
    },
    /// softmax along an axis; lanes of length `len` at stride `inner`
    Softmax {
        x: NodeId,
        out: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    /// per-row normalization over the last axis, then affine
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        out: NodeId,
        rows: usize,
        cols: usize,
        /// saved per-row (mean, 1/sqrt(var+eps))
        saved: Vec<(T, T)>,
    },
    /// out = x[start..start+count, :]
    RowSlice {
        x: NodeId,
        out: NodeId,
        start: usize,
        count: usize,
        cols: usize,
    },
    /// out = x[:, start..start+count]
    ColSlice {
        x: NodeId,
        out: NodeId,
        start: usize,
        count: usize,
        rows: usize,
        in_cols: usize,
    },
    /// out = [parts] stacked along rows
    ConcatRows {
        parts: Vec<NodeId>,
        out: NodeId,
        cols: usize,
    },
    /// out = [parts] stacked along columns
    ConcatCols {
        parts: Vec<NodeId>,
        out: NodeId,
        rows: usize,
    },
    /// out[i, :] = table[ids[i], :]
    Embedding {
        table: NodeId,
        out: NodeId,
        ids: Vec<usize>,
        dim: usize,
    },
    /// out = Σ x (scalar)
    Sum { x: NodeId, out: NodeId },
    /// out = Σ x / numel (scalar)
    Mean { x: NodeId, out: NodeId },
    /// mean over masked rows of -log softmax(logits)[label]
    CrossEntropyMasked {
        logits: NodeId,
        out: NodeId,
        labels: Vec<usize>,
        mask: Vec<bool>,
        classes: usize,
        masked_count: usize,
        /// softmax of each masked row, zeros elsewhere
        probs: Vec<T>,
    },
}

/// Recorded computation over tensors; see module docs.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push_node(&mut self, value: Tensor<T>, requires_grad: bool, is_leaf: bool) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite values entered the tape at node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            retain_grad: is_leaf,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    /// Keep an interior node's gradient through backward (block
    /// boundaries are marked this way for the instrumentation passes).
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id].retain_grad = true;
    }

    /// A leaf that takes no gradient (token ids aside, also dropout masks).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, false, true)
    }

    /// A differentiable leaf. The tensor is snapshotted onto the tape.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_node(value, true, true)
    }

    /// A parameter leaf (alias of [`Tape::leaf`] taking a reference).
    pub fn param(&mut self, value: &Tensor<T>) -> NodeId {
        self.push_node(value.clone(), true, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Gradient of the backward target w.r.t. node `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id].as_ref().map(|g| {
            Tensor::new(self.nodes[id].value.shape().to_vec(), g.clone())
                .expect("gradient shape mirrors its node")
        })
    }

    /// Gradient for a leaf; zeros when nothing flowed to it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<T> {
        self.grad(id)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape().to_vec()))
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Push the output node, recording `op` only when a gradient can flow.
    fn finish(
        &mut self,
        inputs: &[NodeId],
        value: Tensor<T>,
        op: impl FnOnce(NodeId) -> Op<T>,
    ) -> NodeId {
        assert!(
            !self.backward_done,
            "tape already consumed by backward; build a new tape"
        );
        let rg = self.any_grad(inputs);
        let out = self.push_node(value, rg, false);
        if rg {
            self.ops.push(op(out));
        }
        out
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.finish(&[a, b], value, |out| Op::MatMul { a, b, out, m, k, n }))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = vec![T::ZERO; m * n];
        transpose(xv.data(), &mut out, m, n);
        let value = Tensor::new(vec![n, m], out).expect("transpose preserves numel");
        self.finish(&[x], value, |out| Op::Transpose { x, out })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.finish(&[a, b], value, |out| Op::Add { a, b, out }))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.nodes[x].value, &self.nodes[bias].value);
        let cols = xv.cols();
        if bv.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let rows = xv.numel() / cols;
        let mut data = Vec::with_capacity(xv.numel());
        for r in 0..rows {
            for c in 0..cols {
                data.push(xv.data()[r * cols + c] + bv.data()[c]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.finish(&[x, bias], value, |out| Op::AddBias { x, bias, out }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.finish(&[a, b], value, |out| Op::Mul { a, b, out }))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let xv = &self.nodes[x].value;
        let data = xv.data().iter().map(|&v| c * v).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.finish(&[x], value, |out| Op::Scale { x, c, out })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut saved_tanh = Vec::with_capacity(xv.numel());
        let half = T::from_f64(0.5);
        let data = xv
            .data()
            .iter()
            .map(|&v| {
                let t = gelu_inner_tanh(v);
                saved_tanh.push(t);
                half * v * (T::ONE + t)
            })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.finish(&[x], value, |out| Op::Gelu { x, out, saved_tanh })
    }

    /// Softmax along `axis` of an n-d tensor, max-subtracted for stability.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; xv.numel()];
        if inner == 1 {
            softmax_rows(xv.data(), &mut out, outer, len);
        } else {
            softmax_lanes(xv.data(), &mut out, outer, len, inner);
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.finish(&[x], value, |out| Op::Softmax {
            x,
            out,
            outer,
            len,
            inner,
        }))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let (xv, gv, bv) = (
            &self.nodes[x].value,
            &self.nodes[gain].value,
            &self.nodes[bias].value,
        );
        let cols = *xv.shape().last().expect("layer_norm input has a last axis");
        if gv.numel() != cols || bv.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let rows = xv.numel() / cols;
        let inv_n = T::ONE / T::from_usize(cols);
        let mut out = vec![T::ZERO; xv.numel()];
        let mut saved = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let rstd = T::ONE / (var + eps).sqrt();
            saved.push((mean, rstd));
            let orow = &mut out[r * cols..(r + 1) * cols];
            for c in 0..cols {
                orow[c] = (row[c] - mean) * rstd * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.finish(&[x, gain, bias], value, |out| Op::LayerNorm {
            x,
            gain,
            bias,
            out,
            rows,
            cols,
            saved,
        }))
    }

    pub fn row_slice(&mut self, x: NodeId, start: usize, count: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let cols = xv.cols();
        assert!(start + count <= xv.rows(), "row_slice out of range");
        let data = xv.data()[start * cols..(start + count) * cols].to_vec();
        let value = Tensor::new(vec![count, cols], data).expect("sliced rows");
        self.finish(&[x], value, |out| Op::RowSlice {
            x,
            out,
            start,
            count,
            cols,
        })
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, count: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let (rows, in_cols) = (xv.rows(), xv.cols());
        assert!(start + count <= in_cols, "col_slice out of range");
        let mut data = Vec::with_capacity(rows * count);
        for r in 0..rows {
            let row = &xv.data()[r * in_cols..(r + 1) * in_cols];
            data.extend_from_slice(&row[start..start + count]);
        }
        let value = Tensor::new(vec![rows, count], data).expect("sliced cols");
        self.finish(&[x], value, |out| Op::ColSlice {
            x,
            out,
            start,
            count,
            rows,
            in_cols,
        })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.nodes[parts[0]].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[parts[0]].value.shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let parts = parts.to_vec();
        Ok(self.finish(&parts.clone(), value, |out| Op::ConcatRows {
            parts,
            out,
            cols,
        }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.nodes[parts[0]].value.rows();
        let mut cols = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[parts[0]].value.shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            cols += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pv = &self.nodes[p].value;
                let pc = pv.cols();
                data.extend_from_slice(&pv.data()[r * pc..(r + 1) * pc]);
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let parts = parts.to_vec();
        Ok(self.finish(&parts.clone(), value, |out| Op::ConcatCols {
            parts,
            out,
            rows,
        }))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table].value;
        let (vocab, dim) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfBounds {
                    op: "embedding_lookup",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        let ids = ids.to_vec();
        Ok(self.finish(&[table], value, |out| Op::Embedding {
            table,
            out,
            ids,
            dim,
        }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::ZERO;
        for &v in self.nodes[x].value.data() {
            acc += v;
        }
        self.finish(&[x], Tensor::scalar(acc), |out| Op::Sum { x, out })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.numel();
        let mut acc = T::ZERO;
        for &v in self.nodes[x].value.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc / T::from_usize(n));
        self.finish(&[x], value, |out| Op::Mean { x, out })
    }

    /// Cross-entropy averaged over masked rows only.
    ///
    /// `logits` is positions×classes; `labels[i]` is the target class of row
    /// `i`; rows with `mask[i] == false` contribute nothing.
    pub fn cross_entropy_masked(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        let (rows, classes) = (lv.rows(), lv.cols());
        if labels.len() != rows || mask.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_masked",
                left: lv.shape().to_vec(),
                right: vec![labels.len(), mask.len()],
            });
        }
        let masked_count = mask.iter().filter(|&&m| m).count();
        if masked_count == 0 {
            return Err(Error::NoMaskedTokens);
        }
        let mut probs = vec![T::ZERO; rows * classes];
        let mut loss = T::ZERO;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if labels[r] >= classes {
                return Err(Error::OutOfBounds {
                    op: "cross_entropy_masked",
                    index: labels[r],
                    extent: classes,
                });
            }
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let mut mx = row[0];
            for &v in &row[1..] {
                mx = mx.max_val(v);
            }
            let mut denom = T::ZERO;
            let prow = &mut probs[r * classes..(r + 1) * classes];
            for (p, &v) in prow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *p = e;
                denom += e;
            }
            for p in prow.iter_mut() {
                *p = *p / denom;
            }
            loss += -(prow[labels[r]].ln());
        }
        loss = loss / T::from_usize(masked_count);
        let labels = labels.to_vec();
        let mask = mask.to_vec();
        Ok(
            self.finish(&[logits], Tensor::scalar(loss), |out| {
                Op::CrossEntropyMasked {
                    logits,
                    out,
                    labels,
                    mask,
                    classes,
                    masked_count,
                    probs,
                }
            }),
        )
    }

    // ── backward ────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, grad: &[T]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            }
            None => self.grads[id] = Some(grad.to_vec()),
        }
    }

    /// Like [`Tape::accumulate`] but takes ownership, avoiding a copy when
    /// this is the first gradient reaching the node.
    fn accumulate_move(&mut self, id: NodeId, grad: Vec<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            }
            None => self.grads[id] = Some(grad),
        }
    }

    /// Move the upstream gradient out for an op's backward; dropped
    /// afterwards unless the node is marked retained.
    fn take_out_grad(&mut self, out: NodeId) -> Option<Vec<T>> {
        if self.nodes[out].retain_grad {
            self.grads[out].clone()
        } else {
            self.grads[out].take()
        }
    }

    /// Run reverse-mode accumulation from a scalar `loss` node.
    ///
    /// Visits recorded ops exactly once in reverse order. After this call
    /// the tape no longer accepts new ops.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward target must be a scalar, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        if self.backward_done {
            return Err(Error::contract("backward already ran on this tape"));
        }
        self.backward_done = true;
        self.grads[loss] = Some(vec![T::ONE]);
        for idx in (0..self.ops.len()).rev() {
            // Detach the op so node values can be read while grads are written.
            let op = std::mem::replace(&mut self.ops[idx], Op::Sum { x: 0, out: 0 });
            self.backward_op(&op);
            self.ops[idx] = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<T>) {
        match op {
            Op::MatMul { a, b, out, m, k, n } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                if self.nodes[*a].requires_grad {
                    // dA = dOut · Bᵀ
                    let bv = self.nodes[*b].value.data();
                    let mut bt = vec![T::ZERO; k * n];
                    transpose(bv, &mut bt, *k, *n);
                    let mut d_a = vec![T::ZERO; m * k];
                    matmul_acc(&d_out, &bt, &mut d_a, *m, *n, *k);
                    self.accumulate_move(*a, d_a);
                }
                if self.nodes[*b].requires_grad {
                    // dB = Aᵀ · dOut
                    let av = self.nodes[*a].value.data();
                    let mut at = vec![T::ZERO; m * k];
                    transpose(av, &mut at, *m, *k);
                    let mut d_b = vec![T::ZERO; k * n];
                    matmul_acc(&at, &d_out, &mut d_b, *k, *m, *n);
                    self.accumulate_move(*b, d_b);
                }
            }
            Op::Transpose { x, out } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let (n, m) = (
                    self.nodes[*out].value.rows(),
                    self.nodes[*out].value.cols(),
                );
                let mut d_x = vec![T::ZERO; d_out.len()];
                transpose(&d_out, &mut d_x, n, m);
                self.accumulate_move(*x, d_x);
            }
            Op::Add { a, b, out } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                self.accumulate(*a, &d_out);
                self.accumulate_move(*b, d_out);
            }
            Op::AddBias { x, bias, out } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                if self.nodes[*bias].requires_grad {
                    let cols = self.nodes[*bias].value.numel();
                    let mut d_b = vec![T::ZERO; cols];
                    for chunk in d_out.chunks_exact(cols) {
                        for (db, &d) in d_b.iter_mut().zip(chunk) {
                            *db += d;
                        }
                    }
                    self.accumulate_move(*bias, d_b);
                }
                self.accumulate_move(*x, d_out);
            }
            Op::Mul { a, b, out } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                if self.nodes[*a].requires_grad {
                    let bv = self.nodes[*b].value.data();
                    let d_a: Vec<T> = d_out.iter().zip(bv).map(|(&d, &v)| d * v).collect();
                    self.accumulate_move(*a, d_a);
                }
                if self.nodes[*b].requires_grad {
                    let av = self.nodes[*a].value.data();
                    let d_b: Vec<T> = d_out.iter().zip(av).map(|(&d, &v)| d * v).collect();
                    self.accumulate_move(*b, d_b);
                }
            }
            Op::Scale { x, c, out } => {
                let Some(mut d_out) = self.take_out_grad(*out) else {
                    return;
                };
                for d in d_out.iter_mut() {
                    *d *= *c;
                }
                self.accumulate_move(*x, d_out);
            }
            Op::Gelu { x, out, saved_tanh } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let xv = self.nodes[*x].value.data();
                let d_x: Vec<T> = d_out
                    .iter()
                    .zip(xv)
                    .zip(saved_tanh)
                    .map(|((&d, &v), &t)| d * gelu_grad_from_tanh(v, t))
                    .collect();
                self.accumulate_move(*x, d_x);
            }
            Op::Softmax {
                x,
                out,
                outer,
                len,
                inner,
            } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let s = self.nodes[*out].value.data();
                let mut d_x = vec![T::ZERO; d_out.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = T::ZERO;
                        for j in 0..*len {
                            let idx = base + j * inner;
                            dot += d_out[idx] * s[idx];
                        }
                        for j in 0..*len {
                            let idx = base + j * inner;
                            d_x[idx] = s[idx] * (d_out[idx] - dot);
                        }
                    }
                }
                self.accumulate_move(*x, d_x);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                out,
                rows,
                cols,
                saved,
            } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gain].value.data();
                let inv_n = T::ONE / T::from_usize(*cols);
                let mut d_x = vec![T::ZERO; xv.len()];
                let mut d_gain = vec![T::ZERO; *cols];
                let mut d_bias = vec![T::ZERO; *cols];
                for r in 0..*rows {
                    let (mean, rstd) = saved[r];
                    let row = &xv[r * cols..(r + 1) * cols];
                    let d_row = &d_out[r * cols..(r + 1) * cols];
                    // xhat = (x - mean) * rstd; dxhat = d_out * gain
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_xhat = T::ZERO;
                    for c in 0..*cols {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = d_row[c] * gv[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        d_gain[c] += d_row[c] * xhat;
                        d_bias[c] += d_row[c];
                    }
                    for c in 0..*cols {
                        let xhat = (row[c] - mean) * rstd;
                        let dxhat = d_row[c] * gv[c];
                        d_x[r * cols + c] =
                            rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                self.accumulate_move(*x, d_x);
                self.accumulate_move(*gain, d_gain);
                self.accumulate_move(*bias, d_bias);
            }
            Op::RowSlice {
                x,
                out,
                start,
                count,
                cols,
            } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let mut d_x = vec![T::ZERO; self.nodes[*x].value.numel()];
                d_x[start * cols..(start + count) * cols].copy_from_slice(&d_out);
                self.accumulate_move(*x, d_x);
            }
            Op::ColSlice {
                x,
                out,
                start,
                count,
                rows,
                in_cols,
            } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let mut d_x = vec![T::ZERO; self.nodes[*x].value.numel()];
                for r in 0..*rows {
                    for c in 0..*count {
                        d_x[r * in_cols + start + c] = d_out[r * count + c];
                    }
                }
                self.accumulate_move(*x, d_x);
            }
            Op::ConcatRows { parts, out, cols } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.rows() * cols;
                    self.accumulate(p, &d_out[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols { parts, out, rows } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let out_cols = self.nodes[*out].value.cols();
                let mut col_offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.cols();
                    let mut d_p = vec![T::ZERO; rows * pc];
                    for r in 0..*rows {
                        for c in 0..pc {
                            d_p[r * pc + c] = d_out[r * out_cols + col_offset + c];
                        }
                    }
                    self.accumulate_move(p, d_p);
                    col_offset += pc;
                }
            }
            Op::Embedding {
                table,
                out,
                ids,
                dim,
            } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                if self.nodes[*table].requires_grad {
                    let mut d_t = vec![T::ZERO; self.nodes[*table].value.numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..*dim {
                            d_t[id * dim + c] += d_out[i * dim + c];
                        }
                    }
                    self.accumulate_move(*table, d_t);
                }
            }
            Op::Sum { x, out } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let d = d_out[0];
                let d_x = vec![d; self.nodes[*x].value.numel()];
                self.accumulate_move(*x, d_x);
            }
            Op::Mean { x, out } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let n = self.nodes[*x].value.numel();
                let d = d_out[0] / T::from_usize(n);
                let d_x = vec![d; n];
                self.accumulate_move(*x, d_x);
            }
            Op::CrossEntropyMasked {
                logits,
                out,
                labels,
                mask,
                classes,
                masked_count,
                probs,
            } => {
                let Some(d_out) = self.take_out_grad(*out) else {
                    return;
                };
                let scale = d_out[0] / T::from_usize(*masked_count);
                let mut d_l = vec![T::ZERO; probs.len()];
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let base = r * classes;
                    for c in 0..*classes {
                        d_l[base + c] = probs[base + c] * scale;
                    }
                    d_l[base + labels[r]] -= scale;
                }
                self.accumulate_move(*logits, d_l);
            }
        }
    }
}

/// Strided softmax for non-terminal axes.
fn softmax_lanes<T: Scalar>(a: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = a[base];
            for j in 1..len {
                mx = mx.max_val(a[base + j * inner]);
            }
            let mut denom = T::ZERO;
            for j in 0..len {
                let e = (a[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                denom += e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = tape.leaf(t2(&[vec![3.0, -1.0], vec![2.5, 8.0]]));
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia).data(), tape.value(a).data());

        let b = tape.constant(t2(&[vec![1.0], vec![1.0]]));
        let m = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let mb = tape.matmul(m, b).unwrap();
        assert_eq!(tape.value(mb).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got {msg}");
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![4.2, 4.2, 4.2, 4.2]]));
        let g = tape.constant(Tensor::filled(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-6, "expected zero, got {v}");
        }
    }

    #[test]
    fn layer_norm_already_normalized_row_is_fixed_point() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, -1.0]]));
        let g = tape.constant(Tensor::filled(vec![2], 1.0));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, g, b, 1e-15).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-7);
        assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_symmetry_and_overflow_guard() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![0.0, 0.0]]));
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.leaf(t2(&[vec![1000.0, 0.0]]));
        let z = tape.softmax(big, 1).unwrap();
        let zd = tape.value(z).data();
        assert!(zd.iter().all(|v| v.is_finite()));
        assert!((zd[0] - 1.0).abs() < 1e-12 && zd[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_along_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![0.3, -1.2, 2.0], vec![5.0, 5.0, -3.0]]));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        for r in 0..2 {
            let s: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 17;
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, v]));
        let labels = vec![4usize, 9, 16];
        let mask = vec![true, true, true];
        let loss = tape.cross_entropy_masked(logits, &labels, &mask).unwrap();
        let got = tape.value(loss).data()[0];
        assert!((got - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_empty_mask_errors() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 5]));
        let err = tape
            .cross_entropy_masked(logits, &[0, 1], &[false, false])
            .unwrap_err();
        assert!(matches!(err, Error::NoMaskedTokens));
    }

    #[test]
    fn cross_entropy_label_out_of_range_errors() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 5]));
        let err = tape.cross_entropy_masked(logits, &[5], &[true]).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { .. }));
    }

    #[test]
    fn embedding_row_zero_and_bounds() {
        let mut tape = Tape::new();
        let table = tape.leaf(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let e = tape.embedding(table, &[0]).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 2.0]);
        let err = tape.embedding(table, &[2]).unwrap_err();
        assert!(matches!(
            err,
            Error::OutOfBounds {
                index: 2,
                extent: 2,
                ..
            }
        ));
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_w() {
        let mut tape = Tape::new();
        let w = tape.leaf(t2(&[vec![1.5, -2.0, 0.25]]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        // loss = sum(w^2) / 2 -> grad = w
        let mut tape = Tape::new();
        let w = tape.leaf(t2(&[vec![1.5, -2.0, 0.25]]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(vec![2, 2]));
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn tape_linearity_of_two_paths() {
        // loss = sum(w*a) + sum(w*b) must give grad = a + b.
        let mut tape = Tape::new();
        let w = tape.leaf(t2(&[vec![2.0, 3.0]]));
        let a = tape.constant(t2(&[vec![5.0, -1.0]]));
        let b = tape.constant(t2(&[vec![0.5, 4.0]]));
        let wa = tape.mul(w, a).unwrap();
        let wb = tape.mul(w, b).unwrap();
        let sa = tape.sum(wa);
        let sb = tape.sum(wb);
        let loss = tape.add(sa, sb).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[5.5, 3.0]);
    }

    #[test]
    fn constants_never_accumulate_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(t2(&[vec![2.0, 3.0]]));
        let mask = tape.constant(t2(&[vec![0.0, 2.0]]));
        let y = tape.mul(w, mask).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(mask).is_none());
        assert_eq!(tape.grad(w).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t2(&[vec![0.1, -0.4, 0.9], vec![2.0, 0.0, -1.0]]));
            let w = tape.leaf(t2(&[vec![0.3, 0.7], vec![-0.2, 0.5], vec![0.9, 0.1]]));
            let y = tape.matmul(x, w).unwrap();
            let g = tape.gelu(y);
            let s = tape.softmax(g, 1).unwrap();
            tape.value(s).data().to_vec()
        };
        let a: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn slices_and_concats_round_trip_gradients() {
        // y = concat_cols(col_slice(x, 0, 1), col_slice(x, 1, 2)); sum(y)
        // must give all-ones gradient on x.
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]));
        let left = tape.col_slice(x, 0, 1);
        let right = tape.col_slice(x, 1, 2);
        let y = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let top = tape.row_slice(y, 0, 1);
        let bottom = tape.row_slice(y, 1, 1);
        let z = tape.concat_rows(&[top, bottom]).unwrap();
        let loss = tape.sum(z);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }
}
