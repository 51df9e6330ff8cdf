//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and [`Graph::backward`] is a single reverse sweep. A node
//! may carry a [`CustomGrad`] rule that replaces the chain rule at that node;
//! the straight-through estimators are built on it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied backward rule for one node.
pub trait CustomGrad<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in the order the inputs were
    /// registered. `None` means "no gradient flows to this input".
    fn backward(&self, upstream: &Tensor<T>, inputs: &[&Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Leaf { trainable: bool },
    Constant,
    MatMul { a: NodeId, b: NodeId },
    Linear { x: NodeId, w: NodeId },
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom, in_hw: (usize, usize), cols: Vec<T> },
    AddBias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    AvgPool { x: NodeId, k: usize },
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, s: T },
    AddScalar { x: NodeId },
    Square { x: NodeId },
    Sum { x: NodeId },
    SoftmaxCe { logits: NodeId, probs: Vec<T>, labels: Vec<usize> },
    Custom { inputs: Vec<NodeId>, rule: Box<dyn CustomGrad<T>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias { .. } => "add_bias",
            Op::Relu { .. } => "relu",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Square { .. } => "square",
            Op::Sum { .. } => "sum",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// One forward/backward tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    check_finite: bool,
    quant_refs: HashMap<NodeId, Tensor<T>>,
    quantized_leaves: Vec<QuantizedLeaf>,
}

/// A leaf feeding a weight quantizer directly; recorded for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizedLeaf {
    pub leaf: NodeId,
    pub scale: f64,
    pub qmax: i64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// New tape. Non-finite checking is on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
            quant_refs: HashMap::new(),
            quantized_leaves: Vec::new(),
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { .. })
    }

    /// Freezes the quantizer decision for the given leaf at `reference`; see
    /// [`crate::gradcheck`].
    pub fn set_quant_reference(&mut self, leaf: NodeId, reference: Tensor<T>) {
        self.quant_refs.insert(leaf, reference);
    }

    pub(crate) fn quant_reference(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.quant_refs.get(&id)
    }

    pub(crate) fn record_quantized_leaf(&mut self, q: QuantizedLeaf) {
        self.quantized_leaves.push(q);
    }

    pub fn quantized_leaves(&self) -> &[QuantizedLeaf] {
        &self.quantized_leaves
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf { trainable }, value, requires_grad: trainable });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op: Op::Constant, value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// `(m,k) x (k,n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul { a, b }, Tensor::new([m, n], v)?, rg)
    }

    /// Fully connected layer without bias: `x (n,in)`, `w (out,in)` -> `(n,out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape { op: "linear", lhs: sx.to_vec(), rhs: sw.to_vec() });
        }
        let (n, di, d_o) = (sx[0], sx[1], sw[0]);
        let v = kernels::linear_forward(self.value(x).data(), self.value(w).data(), n, di, d_o);
        let rg = self.rg(x) || self.rg(w);
        self.push(Op::Linear { x, w }, Tensor::new([n, d_o], v)?, rg)
    }

    /// Cross-correlation of `x (n,c,h,w)` with `w (oc,c,k,k)`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let bad = || Error::Shape { op: "conv2d", lhs: sx.clone(), rhs: sw.clone() };
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(bad());
        }
        let geom = ConvGeom { in_ch: sw[1], out_ch: sw[0], kernel: sw[2], stride, pad };
        let (n, h, wd) = (sx[0], sx[2], sx[3]);
        let (oh, ow) = geom.out_hw(h, wd).ok_or_else(bad)?;
        let cols = kernels::im2col(self.value(x).data(), n, h, wd, &geom);
        let v = kernels::conv_from_cols(&cols, self.value(w).data(), n, geom.out_ch, geom.patch_len(), oh * ow);
        let rg = self.rg(x) || self.rg(w);
        let cols = if rg { cols } else { Vec::new() };
        self.push(Op::Conv2d { x, w, geom, in_hw: (h, wd), cols }, Tensor::new([n, geom.out_ch, oh, ow], v)?, rg)
    }

    /// Adds a per-feature bias along axis 1 of an `(n, f, ..)` tensor.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Shape { op: "add_bias", lhs: sx.to_vec(), rhs: sb.to_vec() });
        }
        let f = sx[1];
        let inner: usize = sx[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let b = bias[i % f];
            chunk.iter_mut().for_each(|e| *e += b);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Op::AddBias { x, b }, v, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|e| if e > T::ZERO { e } else { T::ZERO });
        let rg = self.rg(x);
        self.push(Op::Relu { x }, v, rg)
    }

    /// Non-overlapping `k x k` max pooling over `(n,c,h,w)`.
    pub fn maxpool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::Shape { op: "maxpool2d", lhs: s, rhs: vec![k, k] });
        }
        let (v, argmax) = kernels::maxpool(self.value(x).data(), s[0] * s[1], s[2], s[3], k);
        let rg = self.rg(x);
        self.push(Op::MaxPool { x, argmax }, Tensor::new([s[0], s[1], s[2] / k, s[3] / k], v)?, rg)
    }

    pub fn avgpool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::Shape { op: "avgpool2d", lhs: s, rhs: vec![k, k] });
        }
        let v = kernels::avgpool(self.value(x).data(), s[0] * s[1], s[2], s[3], k);
        let rg = self.rg(x);
        self.push(Op::AvgPool { x, k }, Tensor::new([s[0], s[1], s[2] / k, s[3] / k], v)?, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        self.push(Op::Reshape { x }, v, rg)
    }

    /// `(n, ..) -> (n, prod(..))`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.is_empty() {
            return Err(Error::Shape { op: "flatten", lhs: vec![], rhs: vec![] });
        }
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add { a, b }, v, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub { a, b }, v, rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul { a, b }, v, rg)
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> Result<NodeId> {
        let v = self.value(x).map(|e| e * s);
        let rg = self.rg(x);
        self.push(Op::Scale { x, s }, v, rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(x).map(|e| e + c);
        let rg = self.rg(x);
        self.push(Op::AddScalar { x }, v, rg)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|e| e * e);
        let rg = self.rg(x);
        self.push(Op::Square { x }, v, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum { x }, v, rg)
    }

    /// Mean softmax cross-entropy over the batch; `logits (n, classes)`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape { op: "softmax_cross_entropy", lhs: s, rhs: vec![labels.len()] });
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Shape { op: "softmax_cross_entropy", lhs: vec![n, c], rhs: vec![bad] });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::ZERO; n * c];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut denom = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p = *p / denom;
            }
            loss -= (row[labels[i]] - m - denom.ln()).to_f64();
        }
        let rg = self.rg(logits);
        let v = Tensor::scalar(T::from_f64(loss / n as f64));
        self.push(Op::SoftmaxCe { logits, probs, labels: labels.to_vec() }, v, rg)
    }

    /// Registers a node whose value was computed by the caller and whose
    /// gradient is given by `rule`.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor<T>, rule: Box<dyn CustomGrad<T>>) -> Result<NodeId> {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(Op::Custom { inputs: inputs.to_vec(), rule }, value, rg)
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`Graph::grad`] returns
    /// the accumulated gradient of every trainable leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(shape));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(shape, T::ONE));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if let Op::Leaf { trainable } = self.nodes[i].op {
                if trainable {
                    self.grads[i] = Some(g);
                }
                continue;
            }
            for (target, contrib) in self.node_backward(i, &g)? {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut self.grads[target.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        g.data(),
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        T::ZERO,
                        &mut da,
                        k as isize,
                        1,
                    );
                    out.push((*a, Tensor::new([m, k], da)?));
                }
                if self.rg(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        T::ZERO,
                        &mut db,
                        n as isize,
                        1,
                    );
                    out.push((*b, Tensor::new([k, n], db)?));
                }
            }
            Op::Linear { x, w } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, di, d_o) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                let (dx, dw) = kernels::linear_backward(g.data(), vx.data(), vw.data(), n, di, d_o);
                if self.rg(*x) {
                    out.push((*x, Tensor::new([n, di], dx)?));
                }
                if self.rg(*w) {
                    out.push((*w, Tensor::new(vw.shape().to_vec(), dw)?));
                }
            }
            Op::Conv2d { x, w, geom, in_hw, cols } => {
                let vw = self.value(*w);
                let s = node.value.shape();
                let (n, p) = (s[0], s[2] * s[3]);
                let (dcols, dw) =
                    kernels::conv_backward_cols(g.data(), cols, vw.data(), n, geom.out_ch, geom.patch_len(), p);
                if self.rg(*x) {
                    let dx = kernels::col2im(&dcols, n, in_hw.0, in_hw.1, geom);
                    out.push((*x, Tensor::new(self.value(*x).shape().to_vec(), dx)?));
                }
                if self.rg(*w) {
                    out.push((*w, Tensor::new(vw.shape().to_vec(), dw)?));
                }
            }
            Op::AddBias { x, b } => {
                if self.rg(*b) {
                    let s = g.shape();
                    let f = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut db = vec![T::ZERO; f];
                    for (idx, &v) in g.data().iter().enumerate() {
                        db[(idx / inner) % f] += v;
                    }
                    out.push((*b, Tensor::new([f], db)?));
                }
                if self.rg(*x) {
                    out.push((*x, g.clone()));
                }
            }
            Op::Relu { x } => {
                let v = self.value(*x);
                out.push((*x, g.zip_map(v, "relu", |gi, xi| if xi > T::ZERO { gi } else { T::ZERO })?));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                out.push((*x, dx));
            }
            Op::AvgPool { x, k } => {
                let s = self.value(*x).shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::from_f64(1.0 / (k * k) as f64);
                let mut dx = Tensor::zeros(s.clone());
                let d = dx.data_mut();
                for pl in 0..s[0] * s[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(pl * oh + oy) * ow + ox] * inv;
                            for dy in 0..*k {
                                for dxx in 0..*k {
                                    d[pl * h * w + (oy * k + dy) * w + ox * k + dxx] += gv;
                                }
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => {
                out.push((*x, g.clone().reshape(self.value(*x).shape().to_vec())?));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul { a, b } => {
                out.push((*a, g.zip_map(self.value(*b), "mul", |p, q| p * q)?));
                out.push((*b, g.zip_map(self.value(*a), "mul", |p, q| p * q)?));
            }
            Op::Scale { x, s } => out.push((*x, g.map(|v| v * *s))),
            Op::AddScalar { x } => out.push((*x, g.clone())),
            Op::Square { x } => {
                let two = T::from_f64(2.0);
                out.push((*x, g.zip_map(self.value(*x), "square", |gi, xi| two * gi * xi)?));
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), gv)));
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let (n, c) = (labels.len(), probs.len() / labels.len().max(1));
                let scale = g.data()[0] * T::from_f64(1.0 / n as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= T::ONE;
                }
                for v in &mut d {
                    *v *= scale;
                }
                out.push((*logits, Tensor::new([n, c], d)?));
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&id| self.value(id)).collect();
                let grads = rule.backward(g, &vals)?;
                for (id, gr) in inputs.iter().zip(grads) {
                    if let Some(gr) = gr {
                        self.value(*id).expect_same_shape(&gr, rule.name())?;
                        out.push((*id, gr));
                    }
                }
            }
        }
        Ok(out)
    }
}
