use super::tensor::{matmul, softmax_rows, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Zero-padding mode for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size is `ceil(in / stride)`; zeros padded symmetrically
    /// (extra row/column goes to the bottom/right).
    Same,
    /// No padding; output size is `(in - kernel) / stride + 1`.
    Valid,
}

type Vjp = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Elementwise product with a constant tensor (dropout masks).
    MulConst { x: NodeId, mask: Tensor },
    ScalarMul { x: NodeId, k: f64 },
    /// Adds a rank-1 bias to every row of a T×N matrix.
    AddBiasRows { x: NodeId, bias: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    SoftmaxRows { x: NodeId },
    Sum { x: NodeId },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: Padding,
    },
    DepthwiseConv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: Padding,
    },
    MaxPool {
        x: NodeId,
        /// Flat input index chosen for each output element.
        argmax: Vec<usize>,
    },
    AvgPoolGlobal { x: NodeId },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
    Reshape { x: NodeId },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows { xs: Vec<NodeId> },
    ConcatCols { xs: Vec<NodeId> },
    ReverseRows { x: NodeId },
    /// [H,W,C] image to a [W, H*C] column-wise feature sequence.
    ColumnsToSeq { x: NodeId },
    CrossEntropy { logits: NodeId, target: usize },
    /// Escape hatch for losses with externally computed gradients.
    Custom { inputs: Vec<NodeId>, vjp: Vjp },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Wengert-style tape: ops recorded in topological order during the forward
/// pass, replayed in reverse by [`Graph::backward`]. Single-writer; a graph
/// is never shared across threads while under construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor as a leaf node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass, if any reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient with unreached nodes reported as zeros of the node's shape.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    // ── op builders ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let out = Tensor::from_vec(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let out = Tensor::from_vec(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Elementwise product with a constant mask; no gradient flows to the mask.
    pub fn mul_const(&mut self, x: NodeId, mask: Tensor) -> Result<NodeId> {
        if self.value(x).shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                left: self.value(x).shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let out = Tensor::from_vec(
            mask.shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(mask.data())
                .map(|(x, m)| x * m)
                .collect(),
        )?;
        Ok(self.push(out, Op::MulConst { x, mask }))
    }

    pub fn scalar_mul(&mut self, x: NodeId, k: f64) -> NodeId {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::ScalarMul { x, k })
    }

    pub fn add_bias_rows(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.shape().len() != 2 || bv.shape().len() != 1 || xv.cols() != bv.shape()[0] {
            return Err(self.shape_err("add_bias_rows", x, bias));
        }
        let (t, n) = (xv.rows(), xv.cols());
        let mut data = xv.data().to_vec();
        for r in 0..t {
            for c in 0..n {
                data[r * n + c] += bv.data()[c];
            }
        }
        let out = Tensor::from_vec(vec![t, n], data)?;
        Ok(self.push(out, Op::AddBiasRows { x, bias }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows { x })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 3 || wv.shape().len() != 4 || xv.shape()[2] != wv.shape()[2] {
            return Err(self.shape_err("conv2d", x, w));
        }
        if bv.shape() != [wv.shape()[3]] {
            return Err(self.shape_err("conv2d bias", b, w));
        }
        let out = conv2d_forward(xv, wv, bv, stride, padding, false)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Depthwise convolution: one `kh×kw` filter per input channel.
    pub fn depthwise_conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 3 || wv.shape().len() != 3 || xv.shape()[2] != wv.shape()[2] {
            return Err(self.shape_err("depthwise_conv2d", x, w));
        }
        if bv.shape() != [wv.shape()[2]] {
            return Err(self.shape_err("depthwise_conv2d bias", b, w));
        }
        let out = depthwise_forward(xv, wv, bv, stride, padding)?;
        Ok(self.push(
            out,
            Op::DepthwiseConv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Max pooling with stride equal to the window; trailing rows/columns
    /// that do not fill a window are truncated.
    pub fn maxpool(&mut self, x: NodeId, pool_h: usize, pool_w: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "maxpool",
                left: xv.shape().to_vec(),
                right: vec![],
            });
        }
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (oh, ow) = (h / pool_h, w / pool_w);
        if oh == 0 || ow == 0 {
            return Err(Error::Contract(format!(
                "maxpool {pool_h}x{pool_w} on {h}x{w} input leaves no output"
            )));
        }
        let mut out = Tensor::zeros(vec![oh, ow, c]);
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..pool_h {
                        for kx in 0..pool_w {
                            let iy = oy * pool_h + ky;
                            let ix = ox * pool_w + kx;
                            let idx = (iy * w + ix) * c + ch;
                            let v = xv.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out.set3(oy, ox, ch, best);
                    argmax[(oy * ow + ox) * c + ch] = best_idx;
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Mean over all spatial positions; [H,W,C] to [1,C].
    pub fn avgpool_global(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "avgpool_global",
                left: xv.shape().to_vec(),
                right: vec![],
            });
        }
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = Tensor::zeros(vec![1, c]);
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += xv.at3(y, xx, ch);
                }
            }
            out.data_mut()[ch] = acc / (h * w) as f64;
        }
        Ok(self.push(out, Op::AvgPoolGlobal { x }))
    }

    /// Batch normalization over the spatial positions of an [H,W,C] tensor
    /// using the batch's own statistics. Returns the output node plus the
    /// batch mean and variance per channel so callers can maintain running
    /// statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: xv.shape().to_vec(),
                right: vec![],
            });
        }
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(self.shape_err("batchnorm scale", gamma, beta));
        }
        let n = (h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += xv.at3(y, xx, ch);
                }
            }
            mean[ch] = acc / n;
            let mut vacc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    let d = xv.at3(y, xx, ch) - mean[ch];
                    vacc += d * d;
                }
            }
            var[ch] = vacc / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(vec![h, w, c]);
        let mut out = Tensor::zeros(vec![h, w, c]);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let xv = self.value(x);
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let xh = (xv.at3(y, xx, ch) - mean[ch]) * inv_std[ch];
                    x_hat.set3(y, xx, ch, xh);
                    out.set3(y, xx, ch, gv[ch] * xh + bv[ch]);
                }
            }
        }
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
        );
        Ok((id, mean, var))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.rows() {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of bounds for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let n = xv.cols();
        let data = xv.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_vec(vec![len, n], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + len > xv.cols() {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of bounds for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let (t, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(t * len);
        for r in 0..t {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::from_vec(vec![t, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let n = self.value(xs[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &id in xs {
            let v = self.value(id);
            if v.shape().len() != 2 || v.cols() != n {
                return Err(self.shape_err("concat_rows", xs[0], id));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(vec![rows, n], data)?;
        Ok(self.push(out, Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let t = self.value(xs[0]).rows();
        let mut total = 0;
        for &id in xs {
            let v = self.value(id);
            if v.shape().len() != 2 || v.rows() != t {
                return Err(self.shape_err("concat_cols", xs[0], id));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(t * total);
        for r in 0..t {
            for &id in xs {
                let v = self.value(id);
                let n = v.cols();
                data.extend_from_slice(&v.data()[r * n..(r + 1) * n]);
            }
        }
        let out = Tensor::from_vec(vec![t, total], data)?;
        Ok(self.push(out, Op::ConcatCols { xs: xs.to_vec() }))
    }

    pub fn reverse_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::Contract("reverse_rows expects rank 2".into()));
        }
        let (t, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(t * n);
        for r in (0..t).rev() {
            data.extend_from_slice(&xv.data()[r * n..(r + 1) * n]);
        }
        let out = Tensor::from_vec(vec![t, n], data)?;
        Ok(self.push(out, Op::ReverseRows { x }))
    }

    /// Reads an [H,W,C] feature map column by column into a [W, H*C]
    /// sequence: time runs left to right, features stack height-major.
    pub fn columns_to_seq(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(Error::Contract("columns_to_seq expects rank 3".into()));
        }
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = Vec::with_capacity(h * w * c);
        for col in 0..w {
            for y in 0..h {
                for ch in 0..c {
                    data.push(xv.at3(y, col, ch));
                }
            }
        }
        let out = Tensor::from_vec(vec![w, h * c], data)?;
        Ok(self.push(out, Op::ColumnsToSeq { x }))
    }

    /// Fused log-softmax negative log-likelihood of `target` for a single
    /// [1,K] logit row.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != 1 || target >= lv.cols() {
            return Err(Error::Contract(format!(
                "cross_entropy: target {target} invalid for logits {:?}",
                lv.shape()
            )));
        }
        let row = lv.data();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - row[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    /// Adds a node whose forward value was computed externally; `vjp` maps
    /// the output gradient to one gradient per input, in order.
    pub fn custom(
        &mut self,
        inputs: Vec<NodeId>,
        value: Tensor,
        vjp: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> NodeId {
        self.push(
            value,
            Op::Custom {
                inputs,
                vjp: Box::new(vjp),
            },
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Populates gradients for every
    /// node the loss reaches; unreached nodes read back as zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = node.grad.as_ref().unwrap();
            let contributions = op_vjp(&node.op, &node.value, g, before);
            for (id, tensor) in contributions {
                accumulate(&mut before[id].grad, tensor);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += v;
            }
        }
        None => *slot = Some(t),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient contributions of one op: pairs of (input index, gradient).
fn op_vjp(op: &Op, value: &Tensor, g: &Tensor, before: &[Node]) -> Vec<(usize, Tensor)> {
    let val = |id: NodeId| &before[id.0].value;
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            // da = g · bᵀ
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..n {
                    let gv = g.data()[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        da[i * k + p] += gv * bv.data()[p * n + j];
                    }
                }
            }
            // db = aᵀ · g
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let aval = av.data()[i * k + p];
                    if aval == 0.0 {
                        continue;
                    }
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let drow = &mut db[p * n..(p + 1) * n];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += aval * gv;
                    }
                }
            }
            vec![
                (a.0, Tensor::from_vec(vec![m, k], da).unwrap()),
                (b.0, Tensor::from_vec(vec![k, n], db).unwrap()),
            ]
        }
        Op::Add { a, b } => vec![(a.0, g.clone()), (b.0, g.clone())],
        Op::Mul { a, b } => {
            let da = Tensor::from_vec(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(gv, bv)| gv * bv)
                    .collect(),
            )
            .unwrap();
            let db = Tensor::from_vec(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, av)| gv * av)
                    .collect(),
            )
            .unwrap();
            vec![(a.0, da), (b.0, db)]
        }
        Op::MulConst { x, mask } => {
            let dx = Tensor::from_vec(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(mask.data())
                    .map(|(gv, m)| gv * m)
                    .collect(),
            )
            .unwrap();
            vec![(x.0, dx)]
        }
        Op::ScalarMul { x, k } => vec![(x.0, g.map(|v| v * k))],
        Op::AddBiasRows { x, bias } => {
            let (t, n) = (g.rows(), g.cols());
            let mut db = vec![0.0; n];
            for r in 0..t {
                for (dv, &gv) in db.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                    *dv += gv;
                }
            }
            vec![
                (x.0, g.clone()),
                (bias.0, Tensor::from_vec(vec![n], db).unwrap()),
            ]
        }
        Op::Sigmoid { x } => {
            let dx = Tensor::from_vec(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(value.data())
                    .map(|(gv, &y)| gv * y * (1.0 - y))
                    .collect(),
            )
            .unwrap();
            vec![(x.0, dx)]
        }
        Op::Tanh { x } => {
            let dx = Tensor::from_vec(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(value.data())
                    .map(|(gv, &y)| gv * (1.0 - y * y))
                    .collect(),
            )
            .unwrap();
            vec![(x.0, dx)]
        }
        Op::Relu { x } => {
            let dx = Tensor::from_vec(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )
            .unwrap();
            vec![(x.0, dx)]
        }
        Op::SoftmaxRows { x } => {
            let (t, c) = (value.rows(), value.cols());
            let mut dx = Tensor::zeros(vec![t, c]);
            for r in 0..t {
                let y = &value.data()[r * c..(r + 1) * c];
                let gr = &g.data()[r * c..(r + 1) * c];
                let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..c {
                    dx.data_mut()[r * c + j] = y[j] * (gr[j] - dot);
                }
            }
            vec![(x.0, dx)]
        }
        Op::Sum { x } => {
            let gv = g.item();
            vec![(x.0, Tensor::filled(val(*x).shape().to_vec(), gv))]
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        } => conv2d_vjp(val(*x), val(*w), g, *stride, *padding, x.0, w.0, b.0),
        Op::DepthwiseConv2d {
            x,
            w,
            b,
            stride,
            padding,
        } => depthwise_vjp(val(*x), val(*w), g, *stride, *padding, x.0, w.0, b.0),
        Op::MaxPool { x, argmax } => {
            let mut dx = Tensor::zeros(val(*x).shape().to_vec());
            for (out_idx, &in_idx) in argmax.iter().enumerate() {
                dx.data_mut()[in_idx] += g.data()[out_idx];
            }
            vec![(x.0, dx)]
        }
        Op::AvgPoolGlobal { x } => {
            let xv = val(*x);
            let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let scale = 1.0 / (h * w) as f64;
            let mut dx = Tensor::zeros(vec![h, w, c]);
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        dx.set3(y, xx, ch, g.data()[ch] * scale);
                    }
                }
            }
            vec![(x.0, dx)]
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
        } => {
            let (h, w, c) = (x_hat.shape()[0], x_hat.shape()[1], x_hat.shape()[2]);
            let n = (h * w) as f64;
            let gv = val(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut sum_dxhat = vec![0.0; c];
            let mut sum_dxhat_xhat = vec![0.0; c];
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        let go = g.at3(y, xx, ch);
                        let xh = x_hat.at3(y, xx, ch);
                        dbeta[ch] += go;
                        dgamma[ch] += go * xh;
                        let dxh = go * gv[ch];
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * xh;
                    }
                }
            }
            let mut dx = Tensor::zeros(vec![h, w, c]);
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        let dxh = g.at3(y, xx, ch) * gv[ch];
                        let xh = x_hat.at3(y, xx, ch);
                        let v = inv_std[ch] / n
                            * (n * dxh - sum_dxhat[ch] - xh * sum_dxhat_xhat[ch]);
                        dx.set3(y, xx, ch, v);
                    }
                }
            }
            vec![
                (x.0, dx),
                (gamma.0, Tensor::from_vec(vec![c], dgamma).unwrap()),
                (beta.0, Tensor::from_vec(vec![c], dbeta).unwrap()),
            ]
        }
        Op::Reshape { x } => {
            let dx = Tensor::from_vec(val(*x).shape().to_vec(), g.data().to_vec()).unwrap();
            vec![(x.0, dx)]
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let n = xv.cols();
            let mut dx = Tensor::zeros(xv.shape().to_vec());
            dx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
            vec![(x.0, dx)]
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (t, n) = (xv.rows(), xv.cols());
            let len = g.cols();
            let mut dx = Tensor::zeros(vec![t, n]);
            for r in 0..t {
                for c in 0..len {
                    dx.data_mut()[r * n + start + c] = g.data()[r * len + c];
                }
            }
            vec![(x.0, dx)]
        }
        Op::ConcatRows { xs } => {
            let n = g.cols();
            let mut out = Vec::with_capacity(xs.len());
            let mut row = 0;
            for &id in xs {
                let rows = before[id.0].value.rows();
                let data = g.data()[row * n..(row + rows) * n].to_vec();
                out.push((id.0, Tensor::from_vec(vec![rows, n], data).unwrap()));
                row += rows;
            }
            out
        }
        Op::ConcatCols { xs } => {
            let t = g.rows();
            let total = g.cols();
            let mut out = Vec::with_capacity(xs.len());
            let mut col = 0;
            for &id in xs {
                let n = before[id.0].value.cols();
                let mut data = Vec::with_capacity(t * n);
                for r in 0..t {
                    data.extend_from_slice(&g.data()[r * total + col..r * total + col + n]);
                }
                out.push((id.0, Tensor::from_vec(vec![t, n], data).unwrap()));
                col += n;
            }
            out
        }
        Op::ReverseRows { x } => {
            let (t, n) = (g.rows(), g.cols());
            let mut data = Vec::with_capacity(t * n);
            for r in (0..t).rev() {
                data.extend_from_slice(&g.data()[r * n..(r + 1) * n]);
            }
            vec![(x.0, Tensor::from_vec(vec![t, n], data).unwrap())]
        }
        Op::ColumnsToSeq { x } => {
            let xv = val(*x);
            let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let mut dx = Tensor::zeros(vec![h, w, c]);
            let mut i = 0;
            for col in 0..w {
                for y in 0..h {
                    for ch in 0..c {
                        dx.set3(y, col, ch, g.data()[i]);
                        i += 1;
                    }
                }
            }
            vec![(x.0, dx)]
        }
        Op::CrossEntropy { logits, target } => {
            let probs = softmax_rows(val(*logits));
            let gv = g.item();
            let mut dl = probs;
            dl.data_mut()[*target] -= 1.0;
            vec![(logits.0, dl.map(|v| v * gv))]
        }
        Op::Custom { inputs, vjp } => {
            let grads = vjp(g);
            assert_eq!(
                grads.len(),
                inputs.len(),
                "custom vjp returned wrong gradient count"
            );
            inputs.iter().map(|id| id.0).zip(grads).collect()
        }
    }
}

// ── convolution kernels ──────────────────────────────────────────────

fn conv_output_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: Padding,
) -> Result<(usize, usize, usize, usize)> {
    let (sh, sw) = stride;
    match padding {
        Padding::Same => {
            let oh = h.div_ceil(sh);
            let ow = w.div_ceil(sw);
            let pad_h = ((oh - 1) * sh + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * sw + kw).saturating_sub(w);
            Ok((oh, ow, pad_h / 2, pad_w / 2))
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::Contract(format!(
                    "valid conv kernel {kh}x{kw} larger than input {h}x{w}"
                )));
            }
            Ok(((h - kh) / sh + 1, (w - kw) / sw + 1, 0, 0))
        }
    }
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: (usize, usize),
    padding: Padding,
    _unused: bool,
) -> Result<Tensor> {
    let (h, iw, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow, pt, pl) = conv_output_dims(h, iw, kh, kw, stride, padding)?;
    let mut out = Tensor::zeros(vec![oh, ow, cout]);
    let mut acc = vec![0.0; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.copy_from_slice(b.data());
            for ky in 0..kh {
                let iy = (oy * stride.0 + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride.1 + kx) as isize - pl as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let xbase = ((iy as usize) * iw + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data()[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w.data()[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
            let obase = (oy * ow + ox) * cout;
            out.data_mut()[obase..obase + cout].copy_from_slice(&acc);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_vjp(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: (usize, usize),
    padding: Padding,
    x_id: usize,
    w_id: usize,
    b_id: usize,
) -> Vec<(usize, Tensor)> {
    let (h, iw, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow, pt, pl) = conv_output_dims(h, iw, kh, kw, stride, padding).unwrap();
    let mut dx = Tensor::zeros(vec![h, iw, cin]);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = vec![0.0; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let gbase = (oy * ow + ox) * cout;
            let grow = &g.data()[gbase..gbase + cout];
            for (co, &gv) in grow.iter().enumerate() {
                db[co] += gv;
            }
            for ky in 0..kh {
                let iy = (oy * stride.0 + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride.1 + kx) as isize - pl as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let xbase = ((iy as usize) * iw + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x.data()[xbase + ci];
                        let wrow = &w.data()[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let dwrow = &mut dw.data_mut()[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let mut dxa = 0.0;
                        for co in 0..cout {
                            let gv = grow[co];
                            dwrow[co] += gv * xv;
                            dxa += gv * wrow[co];
                        }
                        dx.data_mut()[xbase + ci] += dxa;
                    }
                }
            }
        }
    }
    vec![
        (x_id, dx),
        (w_id, dw),
        (b_id, Tensor::from_vec(vec![cout], db).unwrap()),
    ]
}

fn depthwise_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Result<Tensor> {
    let (h, iw, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (w.shape()[0], w.shape()[1]);
    let (oh, ow, pt, pl) = conv_output_dims(h, iw, kh, kw, stride, padding)?;
    let mut out = Tensor::zeros(vec![oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            out.data_mut()[obase..obase + c].copy_from_slice(b.data());
            for ky in 0..kh {
                let iy = (oy * stride.0 + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride.1 + kx) as isize - pl as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let xbase = ((iy as usize) * iw + ix as usize) * c;
                    let wbase = (ky * kw + kx) * c;
                    for ch in 0..c {
                        out.data_mut()[obase + ch] += x.data()[xbase + ch] * w.data()[wbase + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn depthwise_vjp(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: (usize, usize),
    padding: Padding,
    x_id: usize,
    w_id: usize,
    b_id: usize,
) -> Vec<(usize, Tensor)> {
    let (h, iw, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (w.shape()[0], w.shape()[1]);
    let (oh, ow, pt, pl) = conv_output_dims(h, iw, kh, kw, stride, padding).unwrap();
    let mut dx = Tensor::zeros(vec![h, iw, c]);
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = vec![0.0; c];
    for oy in 0..oh {
        for ox in 0..ow {
            let gbase = (oy * ow + ox) * c;
            for (dv, &gv) in db.iter_mut().zip(&g.data()[gbase..gbase + c]) {
                *dv += gv;
            }
            for ky in 0..kh {
                let iy = (oy * stride.0 + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride.1 + kx) as isize - pl as isize;
                    if ix < 0 || ix >= iw as isize {
                        continue;
                    }
                    let xbase = ((iy as usize) * iw + ix as usize) * c;
                    let wbase = (ky * kw + kx) * c;
                    for ch in 0..c {
                        let gv = g.data()[gbase + ch];
                        dw.data_mut()[wbase + ch] += gv * x.data()[xbase + ch];
                        dx.data_mut()[xbase + ch] += gv * w.data()[wbase + ch];
                    }
                }
            }
        }
    }
    vec![
        (x_id, dx),
        (w_id, dw),
        (b_id, Tensor::from_vec(vec![c], db).unwrap()),
    ]
}
