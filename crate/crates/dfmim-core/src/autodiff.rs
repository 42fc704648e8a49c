//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive operation eagerly: building a node
//! computes its forward value immediately, and [`Tape::backward`] walks
//! the record in reverse to accumulate gradients for every leaf created
//! with `needs_grad`. Tapes are single-use per forward pass and
//! single-threaded; independent tapes may run concurrently.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{matmul_raw, Tensor};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a scalar root, got shape {0}")]
    NonScalarRoot(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    Add(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise (Hadamard) product of equal shapes.
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Row-wise softmax over the last axis.
    Softmax(NodeId),
    /// Row-wise layer normalization with learned gain and shift.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    /// Elementwise product with a fixed mask whose entries are 0 or
    /// 1/keep; the mask is part of the recorded op.
    Dropout { x: NodeId, mask: Vec<f64> },
    /// Column-wise concatenation of rank-2 tensors with equal row count.
    ConcatCols(Vec<NodeId>),
    /// Column slice [start, start+len) of a rank-2 tensor.
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Mean focal loss over a batch of logit rows.
    FocalLoss {
        logits: NodeId,
        labels: Vec<usize>,
        gamma: f64,
        class_weights: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by [`NodeId`], produced by [`Tape::backward`].
#[derive(Debug)]
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

/// The operation record. All building methods validate shapes and
/// compute forward values eagerly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert!(self.nodes[id.0].value.is_scalar());
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf: gradients will be accumulated for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Elementwise sum. `b` may have a single row, broadcast over `a`'s
    /// rows (the bias-add pattern).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(va.shape().to_vec(), data).expect("same shape")
        } else if va.shape().len() == 2
            && vb.shape().len() == 2
            && vb.shape()[0] == 1
            && vb.shape()[1] == va.shape()[1]
        {
            let cols = va.cols();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + vb.data()[i % cols])
                .collect();
            Tensor::new(va.shape().to_vec(), data).expect("same shape")
        } else {
            return Err(AdError::Shape(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, needs))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = va
            .matmul(vb)
            .map_err(|e| AdError::Shape(format!("{e}")))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), out, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| c * x).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), out, needs)
    }

    /// Hadamard product of equal shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(AdError::Shape(format!(
                "elementwise product of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, needs))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| libm::tanh(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Tanh(a), out, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Relu(a), out, needs)
    }

    /// Softmax over the last axis, numerically shifted by the row max.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let cols = va.last_dim();
        let mut data = Vec::with_capacity(va.len());
        for row in va.data().chunks(cols) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&x| libm::exp(x - m)).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        self.push(Op::Softmax(a), out, needs)
    }

    /// Layer normalization over the last axis with learned gain `gamma`
    /// and shift `beta`, each a single row of that axis' width.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, AdError> {
        let vx = &self.nodes[x.0].value;
        let cols = vx.last_dim();
        let check = |name: &str, t: &Tensor| -> Result<(), AdError> {
            if t.len() == cols {
                Ok(())
            } else {
                Err(AdError::Shape(format!(
                    "layer_norm {name} has {} entries, axis has {cols}",
                    t.len()
                )))
            }
        };
        check("gamma", &self.nodes[gamma.0].value)?;
        check("beta", &self.nodes[beta.0].value)?;
        let vg = self.nodes[gamma.0].value.data();
        let vb = self.nodes[beta.0].value.data();
        let vx = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(cols) {
            let (xhat, _) = normalize_row(row);
            for (j, xh) in xhat.iter().enumerate() {
                data.push(vg[j] * xh + vb[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, out, needs))
    }

    /// Applies a precomputed dropout mask whose entries are 0 (dropped)
    /// or 1/keep (kept, rescaled). The caller draws the mask from its
    /// seeded stream; see `nn::dropout_mask`.
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId, AdError> {
        let vx = &self.nodes[x.0].value;
        if mask.len() != vx.len() {
            return Err(AdError::Shape(format!(
                "dropout mask has {} entries, input has {}",
                mask.len(),
                vx.len()
            )));
        }
        let data = vx
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        Ok(self.push(Op::Dropout { x, mask }, out, needs))
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        if parts.is_empty() {
            return Err(AdError::Invalid("concat of zero tensors".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(AdError::Shape(format!(
                    "concat_cols needs rank-2 inputs with {rows} rows, got {:?}",
                    v.shape()
                )));
            }
            total_cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total_cols);
        for i in 0..rows {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let c = v.cols();
                data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total_cols], data).expect("counted");
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, needs))
    }

    /// Column slice [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AdError> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 2 || start + len > vx.cols() || len == 0 {
            return Err(AdError::Shape(format!(
                "slice [{start}, {}) of shape {:?}",
                start + len,
                vx.shape()
            )));
        }
        let rows = vx.rows();
        let cols = vx.cols();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&vx.data()[i * cols + start..i * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data).expect("counted");
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, out, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.transposed();
        let needs = self.needs(x);
        self.push(Op::Transpose(x), out, needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(s), needs)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(x);
        self.push(Op::Mean(x), Tensor::scalar(s), needs)
    }

    /// Mean focal loss over logit rows: mean_i of
    /// -w_{y_i} (1 - p_{y_i})^gamma log p_{y_i} with p = softmax(row).
    /// gamma = 0 is exactly cross-entropy.
    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        gamma: f64,
        class_weights: Option<Vec<f64>>,
    ) -> Result<NodeId, AdError> {
        let v = &self.nodes[logits.0].value;
        if v.shape().len() != 2 || v.rows() != labels.len() {
            return Err(AdError::Shape(format!(
                "focal loss on logits {:?} with {} labels",
                v.shape(),
                labels.len()
            )));
        }
        if gamma < 0.0 {
            return Err(AdError::Invalid(format!("focal gamma must be >= 0, got {gamma}")));
        }
        let c = v.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AdError::Invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        if let Some(w) = &class_weights {
            if w.len() != c {
                return Err(AdError::Invalid(format!(
                    "{} class weights for {c} classes",
                    w.len()
                )));
            }
            if w.iter().any(|&x| x <= 0.0) {
                return Err(AdError::Invalid("class weights must be positive".into()));
            }
        }
        let mut total = 0.0;
        for (row, &y) in v.data().chunks(c).zip(labels) {
            let (logp_y, _) = row_log_softmax_at(row, y);
            let p = libm::exp(logp_y);
            let q = 1.0 - p;
            let w = class_weights.as_ref().map_or(1.0, |cw| cw[y]);
            total += -w * libm::pow(q, gamma) * logp_y;
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::FocalLoss {
                logits,
                labels: labels.to_vec(),
                gamma,
                class_weights,
            },
            out,
            needs,
        ))
    }

    /// Reverse pass from a scalar root. Returns a gradient per node;
    /// callers read the leaves they care about.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AdError> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar() {
            return Err(AdError::NonScalarRoot(format!("{:?}", root_val.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_val.shape().to_vec(), vec![1.0]).expect("scalar"));

        for idx in (0..=root.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().expect("checked");
            self.apply_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_backward(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    let vb = &self.nodes[b.0].value;
                    if vb.shape() == g.shape() {
                        Self::accumulate(grads, *b, g.clone());
                    } else {
                        // Broadcast row: sum gradient over rows.
                        let cols = vb.shape()[1];
                        let mut db = vec![0.0; cols];
                        for row in g.data().chunks(cols) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        Self::accumulate(grads, *b, Tensor::new(vec![1, cols], db).expect("row"));
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.needs(*a) {
                    let bt = vb.transposed();
                    let da = matmul_raw(g.data(), g.rows(), g.cols(), bt.data(), bt.cols());
                    Self::accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let at = va.transposed();
                    let db = matmul_raw(at.data(), at.rows(), at.cols(), g.data(), g.cols());
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let data = g.data().iter().map(|x| c * x).collect();
                    Self::accumulate(
                        grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.needs(*a) {
                    let data = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    Self::accumulate(
                        grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), data).expect("same shape"),
                    );
                }
                if self.needs(*b) {
                    let data = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    Self::accumulate(
                        grads,
                        *b,
                        Tensor::new(g.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect();
                    Self::accumulate(
                        grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[a.0].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    Self::accumulate(
                        grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].value;
                    let cols = y.last_dim();
                    let mut data = Vec::with_capacity(y.len());
                    for (grow, yrow) in g.data().chunks(cols).zip(y.data().chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                        data.extend(grow.iter().zip(yrow).map(|(gi, yi)| yi * (gi - dot)));
                    }
                    Self::accumulate(
                        grads,
                        *a,
                        Tensor::new(y.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let vx = &self.nodes[x.0].value;
                let vg = self.nodes[gamma.0].value.data();
                let cols = vx.last_dim();
                let mut dx = if self.needs(*x) {
                    Some(Vec::with_capacity(vx.len()))
                } else {
                    None
                };
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for (xrow, grow) in vx.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let (xhat, inv_std) = normalize_row(xrow);
                    for j in 0..cols {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    if let Some(dst) = dx.as_mut() {
                        // ghat = g .* gamma; dx = inv_std * (ghat - mean(ghat)
                        // - xhat * mean(ghat .* xhat))
                        let ghat: Vec<f64> =
                            grow.iter().zip(vg).map(|(gi, gm)| gi * gm).collect();
                        let m1 = ghat.iter().sum::<f64>() / cols as f64;
                        let m2 = ghat
                            .iter()
                            .zip(&xhat)
                            .map(|(gh, xh)| gh * xh)
                            .sum::<f64>()
                            / cols as f64;
                        for j in 0..cols {
                            dst.push(inv_std * (ghat[j] - m1 - xhat[j] * m2));
                        }
                    }
                }
                if let Some(dst) = dx {
                    Self::accumulate(
                        grads,
                        *x,
                        Tensor::new(vx.shape().to_vec(), dst).expect("same shape"),
                    );
                }
                if self.needs(*gamma) {
                    Self::accumulate(grads, *gamma, reshape_like(&self.nodes[gamma.0].value, dgamma));
                }
                if self.needs(*beta) {
                    Self::accumulate(grads, *beta, reshape_like(&self.nodes[beta.0].value, dbeta));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let data = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                    Self::accumulate(
                        grads,
                        *x,
                        Tensor::new(g.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let cols = self.nodes[p.0].value.cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(rows * cols);
                        for i in 0..rows {
                            data.extend_from_slice(
                                &g.data()[i * total + offset..i * total + offset + cols],
                            );
                        }
                        Self::accumulate(
                            grads,
                            p,
                            Tensor::new(vec![rows, cols], data).expect("counted"),
                        );
                    }
                    offset += cols;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(vx.shape().to_vec());
                    let cols = vx.cols();
                    for i in 0..g.rows() {
                        for j in 0..*len {
                            let v = g.at(i, j);
                            dx.data_mut()[i * cols + start + j] = v;
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    Self::accumulate(grads, *x, g.transposed());
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let vx = &self.nodes[x.0].value;
                    let gs = g.data()[0];
                    let data = vec![gs; vx.len()];
                    Self::accumulate(
                        grads,
                        *x,
                        Tensor::new(vx.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let vx = &self.nodes[x.0].value;
                    let gs = g.data()[0] / vx.len() as f64;
                    let data = vec![gs; vx.len()];
                    Self::accumulate(
                        grads,
                        *x,
                        Tensor::new(vx.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
            Op::FocalLoss {
                logits,
                labels,
                gamma,
                class_weights,
            } => {
                if self.needs(*logits) {
                    let v = &self.nodes[logits.0].value;
                    let c = v.cols();
                    let n = labels.len() as f64;
                    let gs = g.data()[0] / n;
                    let mut data = Vec::with_capacity(v.len());
                    for (row, &y) in v.data().chunks(c).zip(labels) {
                        let (logp_y, probs) = row_log_softmax_at(row, y);
                        let p = libm::exp(logp_y);
                        let q = 1.0 - p;
                        let w = class_weights.as_ref().map_or(1.0, |cw| cw[y]);
                        // dL/dp with L = -w q^gamma log p; the q^{gamma-1}
                        // term carries a log p factor that vanishes as
                        // p -> 1, so it is dropped when q underflows.
                        let term1 = if *gamma > 0.0 && q > 0.0 {
                            *gamma * libm::pow(q, gamma - 1.0) * logp_y
                        } else {
                            0.0
                        };
                        let term2 = -libm::pow(q, *gamma) / p;
                        let dl_dp = w * (term1 + term2);
                        for (j, &pj) in probs.iter().enumerate() {
                            let dp_dz = p * (if j == y { 1.0 } else { 0.0 } - pj);
                            data.push(gs * dl_dp * dp_dz);
                        }
                    }
                    Self::accumulate(
                        grads,
                        *logits,
                        Tensor::new(v.shape().to_vec(), data).expect("same shape"),
                    );
                }
            }
        }
    }
}

/// Flat data arranged in the shape of an existing tensor.
fn reshape_like(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient matches parameter length")
}

/// Standardizes one row: returns (xhat, 1/std) with the layer-norm
/// epsilon inside the square root.
fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
    (row.iter().map(|x| (x - mean) * inv_std).collect(), inv_std)
}

/// Log-softmax value at index `y` plus the full probability row.
fn row_log_softmax_at(row: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = row.iter().map(|&x| libm::exp(x - m)).collect();
    let z: f64 = exps.iter().sum();
    let logp_y = row[y] - m - libm::log(z);
    let probs = exps.iter().map(|e| e / z).collect();
    (logp_y, probs)
}

/// Mean squared error composed from primitives: mean((pred - target)^2).
/// `target` is typically a constant node.
pub fn mse_loss(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId, AdError> {
    let neg = tape.scale(target, -1.0);
    let diff = tape.add(pred, neg)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}
