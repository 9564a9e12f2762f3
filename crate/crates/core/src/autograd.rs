//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node whose
//! inputs were pushed earlier, so node order is a topological order and
//! the graph is acyclic by construction. [`Graph::backward`] walks the
//! tape in reverse once; a second call is rejected.

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeometry, Mat};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    Mul,
    MaskedWeight,
    Conv2d,
    Relu,
    MaxPool2d,
    Flatten,
    Sum,
    SoftmaxCrossEntropy,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MaskedWeight(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(NodeId),
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Flatten(NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::MaskedWeight(..) => OpKind::MaskedWeight,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(..) => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Flatten(..) => OpKind::Flatten,
            Op::Sum(..) => OpKind::Sum,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::MaskedWeight(a)
            | Op::Relu(a)
            | Op::Flatten(a)
            | Op::Sum(a)
            | Op::MaxPool2d { x: a, .. }
            | Op::SoftmaxCrossEntropy { logits: a, .. } => vec![a],
        }
    }
}

#[derive(Debug)]
pub struct GraphNode {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

impl GraphNode {
    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        self.op.inputs()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<GraphNode>,
    backpropagated: bool,
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

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: kind_name(op.kind()),
            });
        }
        self.nodes.push(GraphNode {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn any_requires_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn matrix_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match *self.value(id).shape() {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (kb, n) = self.matrix_dims(b, "matmul")?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![kb, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let rg = self.any_requires_grad(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?, rg)
    }

    /// `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, fin) = self.matrix_dims(x, "linear")?;
        let (fout, win) = self.matrix_dims(w, "linear")?;
        if fin != win {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: vec![n, fin],
                right: vec![fout, win],
            });
        }
        let mut out = vec![0.0; n * fout];
        gemm(
            Mat::new(self.value(x).data(), n, fin),
            Mat::new(self.value(w).data(), fout, fin).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    left: vec![fout],
                    right: bias.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(fout) {
                for (o, bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.any_requires_grad(&ids);
        self.push(Op::Linear { x, w, b }, Tensor::new(&[n, fout], out)?, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_requires_grad(&[a, b]);
        self.push(Op::Add(a, b), v, rg)
    }

    /// Elementwise product with the ordinary product rule in backward.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_requires_grad(&[a, b]);
        self.push(Op::Mul(a, b), v, rg)
    }

    /// Forward `w ⊙ mask`; backward hands the upstream gradient to `w`
    /// unmasked. The weight therefore receives the dense gradient, i.e.
    /// the gradient it would have if every position were active.
    pub fn masked_weight(&mut self, w: NodeId, mask: &Tensor) -> Result<NodeId> {
        let v = self.value(w).zip_map(mask, |x, m| x * m)?;
        let rg = self.nodes[w.0].requires_grad;
        self.push(Op::MaskedWeight(w), v, rg)
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [F, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (n, c, h, wd) = match *self.value(x).shape() {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::dim("conv2d", format!("input must be 4-D, got {s:?}"))),
        };
        let (f, wc, kh, kw) = match *self.value(w).shape() {
            [f, c, kh, kw] => (f, c, kh, kw),
            ref s => return Err(Error::dim("conv2d", format!("weight must be 4-D, got {s:?}"))),
        };
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.value(x).shape().to_vec(),
                right: self.value(w).shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
        };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        if let Some(b) = b {
            if self.value(b).shape() != [f] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: vec![f],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        let mut cols = vec![0.0; n * pl * ol];
        let mut out = vec![0.0; n * f * ol];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let sample = c * h * wd;
            for s in 0..n {
                let cs = &mut cols[s * pl * ol..(s + 1) * pl * ol];
                im2col(&geom, &xv[s * sample..(s + 1) * sample], cs);
                let os = &mut out[s * f * ol..(s + 1) * f * ol];
                gemm(Mat::new(wv, f, pl), Mat::new(cs, pl, ol), os, false);
                if let Some(b) = b {
                    for (row, bv) in os.chunks_mut(ol).zip(self.value(b).data()) {
                        row.iter_mut().for_each(|o| *o += bv);
                    }
                }
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.any_requires_grad(&ids);
        let value = Tensor::new(&[n, f, geom.out_h, geom.out_w], out)?;
        self.push(Op::Conv2d { x, w, b, geom, cols }, value, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Relu(x), v, rg)
    }

    pub fn maxpool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let (n, c, h, w) = match *self.value(x).shape() {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(Error::dim("maxpool2d", format!("input must be 4-D, got {s:?}"))),
        };
        if window == 0 || stride == 0 {
            return Err(Error::dim("maxpool2d", "window and stride must be at least 1"));
        }
        if window > h || window > w {
            return Err(Error::dim(
                "maxpool2d",
                format!("window {window} exceeds spatial extent {h}x{w}"),
            ));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = base + (oy * stride + i) * w + ox * stride + j;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::MaxPool2d { x, argmax }, Tensor::new(&[n, c, oh, ow], out)?, rg)
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let v = self.value(x).reshape(&[n, rest])?;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Flatten(x), v, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Sum(x), v, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, k) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for a batch of {n}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, (row, prow)) in lv.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            prow.iter_mut().for_each(|p| *p /= z);
            loss += z.ln() - (row[labels[i]] - max);
        }
        loss /= n as f64;
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// Accumulates gradients of the scalar `root` into every node that
    /// requires them.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NotScalar { shape: root_shape });
        }
        self.backpropagated = true;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::ones(&root_shape));
        for i in (0..=root.0).rev() {
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &upstream);
            self.nodes[i].grad = Some(upstream);
            for (input, g) in contributions {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        op: kind_name(self.nodes[i].op.kind()),
                    });
                }
                match &mut self.nodes[input.0].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn input_grads(&self, i: usize, up: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(a));
                let n = dims2(self.value(b)).1;
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        Mat::new(up.data(), m, n),
                        Mat::new(self.value(b).data(), k, n).t(),
                        &mut ga,
                        false,
                    );
                    out.push((a, tensor(&[m, k], ga)));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        Mat::new(self.value(a).data(), m, k).t(),
                        Mat::new(up.data(), m, n),
                        &mut gb,
                        false,
                    );
                    out.push((b, tensor(&[k, n], gb)));
                }
            }
            &Op::Linear { x, w, b } => {
                let (n, fin) = dims2(self.value(x));
                let fout = dims2(self.value(w)).0;
                if self.wants(x) {
                    let mut gx = vec![0.0; n * fin];
                    gemm(
                        Mat::new(up.data(), n, fout),
                        Mat::new(self.value(w).data(), fout, fin),
                        &mut gx,
                        false,
                    );
                    out.push((x, tensor(&[n, fin], gx)));
                }
                if self.wants(w) {
                    let mut gw = vec![0.0; fout * fin];
                    gemm(
                        Mat::new(up.data(), n, fout).t(),
                        Mat::new(self.value(x).data(), n, fin),
                        &mut gw,
                        false,
                    );
                    out.push((w, tensor(&[fout, fin], gw)));
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut gb = vec![0.0; fout];
                    for row in up.data().chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
                    }
                    out.push((b, tensor(&[fout], gb)));
                }
            }
            &Op::Add(a, b) => {
                for id in [a, b] {
                    if self.wants(id) {
                        out.push((id, up.clone()));
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    out.push((a, mul(up, self.value(b))));
                }
                if self.wants(b) {
                    out.push((b, mul(up, self.value(a))));
                }
            }
            &Op::MaskedWeight(w) => out.push((w, up.clone())),
            Op::Conv2d { x, w, b, geom, cols } => {
                let (x, w, b, g) = (*x, *w, *b, *geom);
                let n = self.value(x).shape()[0];
                let f = self.value(w).shape()[0];
                let (pl, ol) = (g.patch_len(), g.out_len());
                let sample = g.channels * g.height * g.width;
                let ud = up.data();
                if self.wants(w) {
                    let mut gw = vec![0.0; f * pl];
                    for s in 0..n {
                        gemm(
                            Mat::new(&ud[s * f * ol..(s + 1) * f * ol], f, ol),
                            Mat::new(&cols[s * pl * ol..(s + 1) * pl * ol], pl, ol).t(),
                            &mut gw,
                            true,
                        );
                    }
                    out.push((w, tensor(self.value(w).shape(), gw)));
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let mut gb = vec![0.0; f];
                    for s in 0..n {
                        for (fi, row) in ud[s * f * ol..(s + 1) * f * ol].chunks(ol).enumerate() {
                            gb[fi] += row.iter().sum::<f64>();
                        }
                    }
                    out.push((b, tensor(&[f], gb)));
                }
                if self.wants(x) {
                    let mut gx = vec![0.0; n * sample];
                    let mut dcols = vec![0.0; pl * ol];
                    let wv = self.value(w).data();
                    for s in 0..n {
                        gemm(
                            Mat::new(wv, f, pl).t(),
                            Mat::new(&ud[s * f * ol..(s + 1) * f * ol], f, ol),
                            &mut dcols,
                            false,
                        );
                        col2im(&g, &dcols, &mut gx[s * sample..(s + 1) * sample]);
                    }
                    out.push((x, tensor(self.value(x).shape(), gx)));
                }
            }
            &Op::Relu(x) => {
                let g = self
                    .value(x)
                    .zip_map(up, |v, u| if v > 0.0 { u } else { 0.0 })
                    .expect("relu shapes");
                out.push((x, g));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut g = vec![0.0; self.value(*x).len()];
                for (&idx, &u) in argmax.iter().zip(up.data()) {
                    g[idx] += u;
                }
                out.push((*x, tensor(self.value(*x).shape(), g)));
            }
            &Op::Flatten(x) => {
                out.push((x, up.reshape(self.value(x).shape()).expect("flatten shapes")));
            }
            &Op::Sum(x) => {
                out.push((x, Tensor::full(self.value(x).shape(), up.data()[0])));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, k) = dims2(self.value(*logits));
                let scale = up.data()[0] / n as f64;
                let mut g = probs.clone();
                for (row, &label) in g.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*logits, tensor(&[n, k], g)));
            }
        }
        out
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("gradient shape")
}

fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x * y).expect("mul shapes")
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::Linear => "linear",
        OpKind::Add => "add",
        OpKind::Mul => "mul",
        OpKind::MaskedWeight => "masked_weight",
        OpKind::Conv2d => "conv2d",
        OpKind::Relu => "relu",
        OpKind::MaxPool2d => "maxpool2d",
        OpKind::Flatten => "flatten",
        OpKind::Sum => "sum",
        OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
    }
}
