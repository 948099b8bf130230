//! Gradient tape: a Wengert list of forward ops replayed in reverse.
//!
//! Every op validates shapes up front and returns a structured error instead
//! of panicking, since layer configurations arrive from user config files.
//! A tape can be consumed by `backward` exactly once.

use std::collections::BTreeMap;

use super::kernels::{self, ConvDims};
use super::{numel, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

enum Op {
    Leaf,
    Conv2d { x: ValueId, kernels: ValueId, bias: ValueId, dims: ConvDims },
    Deconv2d { x: ValueId, kernels: ValueId, bias: ValueId, dims: ConvDims },
    Dense { x: ValueId, weight: ValueId, bias: ValueId, n: usize, i: usize, o: usize },
    Relu { x: ValueId },
    Sigmoid { x: ValueId },
    Reshape { x: ValueId },
    Sse { a: ValueId, b: ValueId },
    Bce { target: ValueId, pred: ValueId },
    SoftmaxCe { logits: ValueId, classes: Vec<usize>, probs: Vec<f64>, n: usize, k: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::Dense { .. } => "dense",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Reshape { .. } => "reshape",
            Op::Sse { .. } => "sse",
            Op::Bce { .. } => "bce",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> ValueId {
        kernels::debug_assert_finite(&data, op.name());
        self.nodes.push(Node { data, shape, requires_grad, op });
        self.grads.push(Vec::new());
        ValueId(self.nodes.len() - 1)
    }

    fn node(&self, id: ValueId) -> &Node {
        &self.nodes[id.0]
    }

    /// Copies a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// A leaf that never receives gradient, regardless of the source flag.
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        self.push(t.data().to_vec(), t.shape().to_vec(), false, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.node(id).shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Op name histogram, used by tests that assert which rules a graph
    /// actually recorded.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for node in &self.nodes {
            *counts.entry(node.op.name()).or_insert(0) += 1;
        }
        counts
    }

    fn mismatch(op: &'static str, details: String) -> TensorError {
        TensorError::ShapeMismatch { op, details }
    }

    fn expect_rank(&self, op: &'static str, id: ValueId, rank: usize) -> Result<(), TensorError> {
        let shape = self.shape(id);
        if shape.len() != rank {
            return Err(Self::mismatch(op, format!("expected rank {rank}, got shape {shape:?}")));
        }
        Ok(())
    }

    /// Valid convolution. `x` is `[n, c, h, w]`, `kernels` `[k, c, kh, kw]`,
    /// `bias` `[k]`.
    pub fn conv2d(&mut self, x: ValueId, kernels: ValueId, bias: ValueId, stride: usize) -> Result<ValueId, TensorError> {
        self.expect_rank("conv2d", x, 4)?;
        self.expect_rank("conv2d", kernels, 4)?;
        self.expect_rank("conv2d", bias, 1)?;
        let (xs, ks, bs) = (self.shape(x).to_vec(), self.shape(kernels).to_vec(), self.shape(bias).to_vec());
        if ks[1] != xs[1] {
            return Err(Self::mismatch("conv2d", format!("input has {} channels but kernels expect {}", xs[1], ks[1])));
        }
        if bs[0] != ks[0] {
            return Err(Self::mismatch("conv2d", format!("bias has {} entries for {} kernels", bs[0], ks[0])));
        }
        let dims = ConvDims::conv(xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride).ok_or_else(|| {
            Self::mismatch(
                "conv2d",
                format!("kernel {}x{} stride {stride} does not fit input {}x{}", ks[2], ks[3], xs[2], xs[3]),
            )
        })?;
        let mut out = vec![0.0; dims.n * dims.c_out * dims.h_out * dims.w_out];
        kernels::conv2d_forward(&self.node(x).data, &self.node(kernels).data, &self.node(bias).data, &dims, &mut out);
        let rg = self.node(x).requires_grad || self.node(kernels).requires_grad || self.node(bias).requires_grad;
        let shape = vec![dims.n, dims.c_out, dims.h_out, dims.w_out];
        Ok(self.push(out, shape, rg, Op::Conv2d { x, kernels, bias, dims }))
    }

    /// Transposed convolution. `x` is `[n, c, h, w]`, `kernels` `[c, k, kh, kw]`,
    /// `bias` `[k]`.
    pub fn deconv2d(&mut self, x: ValueId, kernels: ValueId, bias: ValueId, stride: usize) -> Result<ValueId, TensorError> {
        self.expect_rank("deconv2d", x, 4)?;
        self.expect_rank("deconv2d", kernels, 4)?;
        self.expect_rank("deconv2d", bias, 1)?;
        let (xs, ks, bs) = (self.shape(x).to_vec(), self.shape(kernels).to_vec(), self.shape(bias).to_vec());
        if ks[0] != xs[1] {
            return Err(Self::mismatch("deconv2d", format!("input has {} channels but kernels expect {}", xs[1], ks[0])));
        }
        if bs[0] != ks[1] {
            return Err(Self::mismatch("deconv2d", format!("bias has {} entries for {} output channels", bs[0], ks[1])));
        }
        let dims = ConvDims::deconv(xs[0], xs[1], xs[2], xs[3], ks[1], ks[2], ks[3], stride)
            .ok_or_else(|| Self::mismatch("deconv2d", format!("degenerate geometry for input {xs:?} kernel {ks:?}")))?;
        let mut out = vec![0.0; dims.n * dims.c_out * dims.h_out * dims.w_out];
        kernels::deconv2d_forward(&self.node(x).data, &self.node(kernels).data, &self.node(bias).data, &dims, &mut out);
        let rg = self.node(x).requires_grad || self.node(kernels).requires_grad || self.node(bias).requires_grad;
        let shape = vec![dims.n, dims.c_out, dims.h_out, dims.w_out];
        Ok(self.push(out, shape, rg, Op::Deconv2d { x, kernels, bias, dims }))
    }

    /// Fully connected layer. `x` is `[n, i]`, `weight` `[i, o]`, `bias` `[o]`.
    pub fn dense(&mut self, x: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId, TensorError> {
        self.expect_rank("dense", x, 2)?;
        self.expect_rank("dense", weight, 2)?;
        self.expect_rank("dense", bias, 1)?;
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(weight).to_vec(), self.shape(bias).to_vec());
        if xs[1] != ws[0] {
            return Err(Self::mismatch("dense", format!("input width {} does not match weight rows {}", xs[1], ws[0])));
        }
        if bs[0] != ws[1] {
            return Err(Self::mismatch("dense", format!("bias has {} entries for {} outputs", bs[0], ws[1])));
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * o];
        kernels::dense_forward(&self.node(x).data, &self.node(weight).data, &self.node(bias).data, n, i, o, &mut out);
        let rg = self.node(x).requires_grad || self.node(weight).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(out, vec![n, o], rg, Op::Dense { x, weight, bias, n, i, o }))
    }

    pub fn activation(&mut self, x: ValueId, kind: Activation) -> ValueId {
        let src = &self.node(x).data;
        let mut out = vec![0.0; src.len()];
        match kind {
            Activation::Relu => kernels::relu_forward(src, &mut out),
            Activation::Sigmoid => kernels::sigmoid_forward(src, &mut out),
        }
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        let op = match kind {
            Activation::Relu => Op::Relu { x },
            Activation::Sigmoid => Op::Sigmoid { x },
        };
        self.push(out, shape, rg, op)
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId, TensorError> {
        let node = self.node(x);
        if numel(shape) != node.data.len() {
            return Err(Self::mismatch(
                "reshape",
                format!("cannot view {:?} ({} elements) as {:?}", node.shape, node.data.len(), shape),
            ));
        }
        let data = node.data.clone();
        let rg = node.requires_grad;
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape { x }))
    }

    /// Sum of squared differences, reduced to a scalar.
    pub fn sse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch("sse", format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        let v = kernels::sse_value(&self.node(a).data, &self.node(b).data);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "sse" });
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![v], vec![1], rg, Op::Sse { a, b }))
    }

    /// Binary cross entropy summed over elements. `pred` must lie in (0, 1).
    pub fn bce(&mut self, target: ValueId, pred: ValueId) -> Result<ValueId, TensorError> {
        if self.shape(target) != self.shape(pred) {
            return Err(Self::mismatch("bce", format!("operand shapes {:?} and {:?} differ", self.shape(target), self.shape(pred))));
        }
        let v = kernels::bce_value(&self.node(target).data, &self.node(pred).data);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "bce" });
        }
        let rg = self.node(target).requires_grad || self.node(pred).requires_grad;
        Ok(self.push(vec![v], vec![1], rg, Op::Bce { target, pred }))
    }

    /// Softmax cross entropy against integer labels, summed over rows.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, classes: &[usize]) -> Result<ValueId, TensorError> {
        self.expect_rank("softmax_cross_entropy", logits, 2)?;
        let shape = self.shape(logits).to_vec();
        let (n, k) = (shape[0], shape[1]);
        if classes.len() != n {
            return Err(Self::mismatch("softmax_cross_entropy", format!("{n} rows but {} labels", classes.len())));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(Self::mismatch("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let (v, probs) = kernels::softmax_ce_value(&self.node(logits).data, classes, n, k);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_cross_entropy" });
        }
        let rg = self.node(logits).requires_grad;
        Ok(self.push(vec![v], vec![1], rg, Op::SoftmaxCe { logits, classes: classes.to_vec(), probs, n, k }))
    }

    /// Reverse sweep seeded with dloss = 1. Consumes the tape: a second call
    /// is an error because intermediate gradients are already populated.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_node = self.node(loss);
        if loss_node.data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_node.shape.clone() });
        }
        self.consumed = true;
        for idx in 0..self.nodes.len() {
            if self.nodes[idx].requires_grad {
                self.grads[idx] = vec![0.0; self.nodes[idx].data.len()];
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any trainable value; all grads stay zero.
            return Ok(());
        }
        self.grads[loss.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut self.grads[idx]);
            self.apply_backward(idx, &g);
            self.grads[idx] = g;
        }
        Ok(())
    }

    fn wants_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn apply_backward(&mut self, idx: usize, g: &[f64]) {
        // Inputs always precede outputs, so `idx` never aliases an input slot.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, kernels, bias, dims } => {
                let (x, kernels, bias, dims) = (*x, *kernels, *bias, *dims);
                if self.wants_grad(x) {
                    let kdata = std::mem::take(&mut self.nodes[kernels.0].data);
                    let mut dx = std::mem::take(&mut self.grads[x.0]);
                    kernels::conv2d_grad_input(g, &kdata, &dims, &mut dx);
                    self.grads[x.0] = dx;
                    self.nodes[kernels.0].data = kdata;
                }
                if self.wants_grad(kernels) {
                    let xdata = std::mem::take(&mut self.nodes[x.0].data);
                    let mut dk = std::mem::take(&mut self.grads[kernels.0]);
                    kernels::conv2d_grad_kernel(g, &xdata, &dims, &mut dk);
                    self.grads[kernels.0] = dk;
                    self.nodes[x.0].data = xdata;
                }
                if self.wants_grad(bias) {
                    let mut db = std::mem::take(&mut self.grads[bias.0]);
                    kernels::conv2d_grad_bias(g, &dims, &mut db);
                    self.grads[bias.0] = db;
                }
            }
            Op::Deconv2d { x, kernels, bias, dims } => {
                let (x, kernels, bias, dims) = (*x, *kernels, *bias, *dims);
                if self.wants_grad(x) {
                    let kdata = std::mem::take(&mut self.nodes[kernels.0].data);
                    let mut dx = std::mem::take(&mut self.grads[x.0]);
                    kernels::deconv2d_grad_input(g, &kdata, &dims, &mut dx);
                    self.grads[x.0] = dx;
                    self.nodes[kernels.0].data = kdata;
                }
                if self.wants_grad(kernels) {
                    let xdata = std::mem::take(&mut self.nodes[x.0].data);
                    let mut dk = std::mem::take(&mut self.grads[kernels.0]);
                    kernels::deconv2d_grad_kernel(g, &xdata, &dims, &mut dk);
                    self.grads[kernels.0] = dk;
                    self.nodes[x.0].data = xdata;
                }
                if self.wants_grad(bias) {
                    let mut db = std::mem::take(&mut self.grads[bias.0]);
                    kernels::deconv2d_grad_bias(g, &dims, &mut db);
                    self.grads[bias.0] = db;
                }
            }
            Op::Dense { x, weight, bias, n, i, o } => {
                let (x, weight, bias, n, i, o) = (*x, *weight, *bias, *n, *i, *o);
                if self.wants_grad(x) {
                    let wdata = std::mem::take(&mut self.nodes[weight.0].data);
                    let mut dx = std::mem::take(&mut self.grads[x.0]);
                    kernels::dense_grad_input(g, &wdata, n, i, o, &mut dx);
                    self.grads[x.0] = dx;
                    self.nodes[weight.0].data = wdata;
                }
                if self.wants_grad(weight) {
                    let xdata = std::mem::take(&mut self.nodes[x.0].data);
                    let mut dw = std::mem::take(&mut self.grads[weight.0]);
                    kernels::dense_grad_weight(g, &xdata, n, i, o, &mut dw);
                    self.grads[weight.0] = dw;
                    self.nodes[x.0].data = xdata;
                }
                if self.wants_grad(bias) {
                    let mut db = std::mem::take(&mut self.grads[bias.0]);
                    kernels::dense_grad_bias(g, n, o, &mut db);
                    self.grads[bias.0] = db;
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.wants_grad(x) {
                    let xdata = std::mem::take(&mut self.nodes[x.0].data);
                    let mut dx = std::mem::take(&mut self.grads[x.0]);
                    kernels::relu_backward(&xdata, g, &mut dx);
                    self.grads[x.0] = dx;
                    self.nodes[x.0].data = xdata;
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if self.wants_grad(x) {
                    let ydata = std::mem::take(&mut self.nodes[idx].data);
                    let mut dx = std::mem::take(&mut self.grads[x.0]);
                    kernels::sigmoid_backward(&ydata, g, &mut dx);
                    self.grads[x.0] = dx;
                    self.nodes[idx].data = ydata;
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.wants_grad(x) {
                    for (d, &src) in self.grads[x.0].iter_mut().zip(g) {
                        *d += src;
                    }
                }
            }
            Op::Sse { a, b } => {
                let (a, b) = (*a, *b);
                let dl = g[0];
                let (wa, wb) = (self.wants_grad(a), self.wants_grad(b));
                if wa || wb {
                    let adata = std::mem::take(&mut self.nodes[a.0].data);
                    let bdata = std::mem::take(&mut self.nodes[b.0].data);
                    let mut da = if wa { std::mem::take(&mut self.grads[a.0]) } else { Vec::new() };
                    let mut db = if wb { std::mem::take(&mut self.grads[b.0]) } else { Vec::new() };
                    kernels::sse_backward(
                        &adata,
                        &bdata,
                        dl,
                        if wa { Some(&mut da) } else { None },
                        if wb { Some(&mut db) } else { None },
                    );
                    if wa {
                        self.grads[a.0] = da;
                    }
                    if wb {
                        self.grads[b.0] = db;
                    }
                    self.nodes[a.0].data = adata;
                    self.nodes[b.0].data = bdata;
                }
            }
            Op::Bce { target, pred } => {
                let (target, pred) = (*target, *pred);
                let dl = g[0];
                let (wt, wp) = (self.wants_grad(target), self.wants_grad(pred));
                if wt || wp {
                    let tdata = std::mem::take(&mut self.nodes[target.0].data);
                    let pdata = std::mem::take(&mut self.nodes[pred.0].data);
                    let mut dt = if wt { std::mem::take(&mut self.grads[target.0]) } else { Vec::new() };
                    let mut dp = if wp { std::mem::take(&mut self.grads[pred.0]) } else { Vec::new() };
                    kernels::bce_backward(
                        &tdata,
                        &pdata,
                        dl,
                        if wt { Some(&mut dt) } else { None },
                        if wp { Some(&mut dp) } else { None },
                    );
                    if wt {
                        self.grads[target.0] = dt;
                    }
                    if wp {
                        self.grads[pred.0] = dp;
                    }
                    self.nodes[target.0].data = tdata;
                    self.nodes[pred.0].data = pdata;
                }
            }
            Op::SoftmaxCe { logits, classes, probs: _, n, k } => {
                let (logits, n, k) = (*logits, *n, *k);
                if self.wants_grad(logits) {
                    let dl = g[0];
                    let classes = classes.clone();
                    let probs = std::mem::take(match &mut self.nodes[idx].op {
                        Op::SoftmaxCe { probs, .. } => probs,
                        _ => unreachable!(),
                    });
                    let mut dlogits = std::mem::take(&mut self.grads[logits.0]);
                    kernels::softmax_ce_backward(&probs, &classes, dl, n, k, &mut dlogits);
                    self.grads[logits.0] = dlogits;
                    if let Op::SoftmaxCe { probs: slot, .. } = &mut self.nodes[idx].op {
                        *slot = probs;
                    }
                }
            }
        }
    }

    /// Gradient of a node after `backward`. `None` when the node does not
    /// require gradient or no backward pass has run.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        let g = &self.grads[id.0];
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }
}
