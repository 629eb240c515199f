use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::kernels::{col2im, gemm, im2col};
use crate::{GraphError, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable operation with a hand-written adjoint.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GraphError>;

    /// Returns one gradient per input (`None` for inputs it does not propagate into).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor)
        -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics; the statistics are kept on the node.
    Train,
    /// Normalize with externally tracked running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Conv2d { kernel: usize },
    ConvTranspose2x2,
    MaxPool2 { argmax: Vec<usize> },
    Relu,
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, train: bool, stats: Option<BatchStats> },
    Softmax,
    Add,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    Concat,
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2x2 => "conv_transpose2x2",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Relu => "relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Softmax => "softmax",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Concat => "concat",
            Op::Custom(op) => op.name(),
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Eager reverse-mode tape. Values are computed as nodes are appended, so node
/// order is a topological order and `backward` is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
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

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        self.grads = None;
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), GraphError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(id.0))
        }
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Zero-padded "same" convolution with an odd square kernel and stride 1.
    ///
    /// `x`: `(n, cin, h, w)`, `weight`: `(cout, cin, k, k)`, `bias`: `(cout)`.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        for id in [x, weight, bias] {
            self.check(id)?;
        }
        let [n, cin, h, w] = self.value(x).dims4("conv2d")?;
        let [cout, wcin, k, k2] = self.value(weight).dims4("conv2d")?;
        if wcin != cin || k != k2 || k % 2 == 0 || self.value(bias).shape() != [cout] {
            return Err(GraphError::shape(
                "conv2d",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.value(x).shape(),
                    self.value(weight).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let hw = h * w;
        let patch = cin * k * k;
        let mut out = vec![0.0; n * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; patch * hw] };
        for b in 0..n {
            let xin = &xv[b * cin * hw..(b + 1) * cin * hw];
            let dst = &mut out[b * cout * hw..(b + 1) * cout * hw];
            for (co, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(bv[co]);
            }
            let src = if k == 1 {
                xin
            } else {
                im2col(xin, cin, h, w, k, &mut cols);
                &cols
            };
            gemm(cout, patch, hw, wv, false, src, false, 1.0, dst);
        }
        let value = Tensor::new(&[n, cout, h, w], out)?;
        Ok(self.push(Op::Conv2d { kernel: k }, vec![x, weight, bias], value))
    }

    /// Transposed convolution with a 2x2 kernel and stride 2 (doubles height and width).
    ///
    /// `x`: `(n, cin, h, w)`, `weight`: `(cin, cout, 2, 2)`, `bias`: `(cout)`.
    pub fn conv_transpose2x2(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, GraphError> {
        for id in [x, weight, bias] {
            self.check(id)?;
        }
        let [n, cin, h, w] = self.value(x).dims4("conv_transpose2x2")?;
        let [wcin, cout, ka, kb] = self.value(weight).dims4("conv_transpose2x2")?;
        if wcin != cin || ka != 2 || kb != 2 || self.value(bias).shape() != [cout] {
            return Err(GraphError::shape(
                "conv_transpose2x2",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.value(x).shape(),
                    self.value(weight).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * cout * oh * ow];
        let mut y = vec![0.0; cout * 4 * hw];
        for b in 0..n {
            let xin = &xv[b * cin * hw..(b + 1) * cin * hw];
            gemm(cout * 4, cin, hw, wv, true, xin, false, 0.0, &mut y);
            let dst = &mut out[b * cout * oh * ow..(b + 1) * cout * oh * ow];
            for co in 0..cout {
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = &y[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                        for i in 0..h {
                            for j in 0..w {
                                dst[(co * oh + 2 * i + a) * ow + 2 * j + bb] =
                                    row[i * w + j] + bv[co];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        Ok(self.push(Op::ConvTranspose2x2, vec![x, weight, bias], value))
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in row-major order.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check(x)?;
        let [n, c, h, w] = self.value(x).dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(GraphError::shape(
                "max_pool2",
                format!("spatial size {h}x{w} is not divisible by 2"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x], value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check(x)?;
        let v = self.value(x);
        let out = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape(), out)?;
        Ok(self.push(Op::Relu, vec![x], value))
    }

    /// Per-channel batch normalization over `(n, h, w)` followed by a per-channel affine map.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<NodeId, GraphError> {
        for id in [x, gamma, beta] {
            self.check(id)?;
        }
        let [n, c, h, w] = self.value(x).dims4("batch_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(GraphError::shape(
                "batch_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.value(x).shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let hw = h * w;
        let count = n * hw;
        let xv = self.value(x).data();
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        ss += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(GraphError::shape(
                        "batch_norm",
                        format!("running stats of length {}/{} for {c} channels", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in range {
                    let z = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = gv[ch] * z + bv[ch];
                }
            }
        }
        let stats = train.then_some(BatchStats { mean, var, count });
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(Op::BatchNorm { xhat, inv_std, train, stats }, vec![x, gamma, beta], value))
    }

    /// Statistics recorded by a training-mode batch norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<&BatchStats> {
        match &self.nodes.get(id.0)?.op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// Softmax across the channel axis of a `(n, c, h, w)` tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check(x)?;
        let [n, c, h, w] = self.value(x).dims4("softmax")?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(xv[base + ch * hw + p]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (xv[base + ch * hw + p] - m).exp();
                    out[base + ch * hw + p] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[base + ch * hw + p] /= z;
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(Op::Softmax, vec![x], value))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId, GraphError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(GraphError::shape(
                op.name(),
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = match op {
            Op::Add => va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect(),
            _ => va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
        };
        let value = Tensor::new(va.shape(), out)?;
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Add)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Mul)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        self.check(x)?;
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|a| a * factor).collect())?;
        Ok(self.push(Op::Scale(factor), vec![x], value))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check(x)?;
        let s = self.value(x).sum();
        Ok(self.push(Op::Sum, vec![x], Tensor::scalar(s)))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.check(x)?;
        let v = self.value(x);
        let m = v.sum() / v.len() as f64;
        Ok(self.push(Op::Mean, vec![x], Tensor::scalar(m)))
    }

    /// Concatenates `(n, c_i, h, w)` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::shape("concat", "no inputs".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let [n, _, h, w] = self.value(parts[0]).dims4("concat")?;
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4("concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(GraphError::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.value(parts[0]).shape(), self.value(p).shape()),
                ));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                out.extend_from_slice(&v.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        Ok(self.push(Op::Concat, parts.to_vec(), value))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        for &i in inputs {
            self.check(i)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
        let value = op.forward(&values)?;
        Ok(self.push(Op::Custom(op), inputs.to_vec(), value))
    }

    /// Reverse sweep from a scalar node; gradients of every tracked node become available.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), GraphError> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(GraphError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g);
            grads[i] = Some(g);
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contribution {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(c),
                    }
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `id` (zeros if unreached).
    pub fn grad(&self, id: NodeId) -> Result<Vec<f64>, GraphError> {
        self.check(id)?;
        let grads = self.grads.as_ref().ok_or(GraphError::BackwardNotRun)?;
        Ok(grads[id.0].clone().unwrap_or_else(|| vec![0.0; self.value(id).len()]))
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { kernel } => self.conv2d_backward(inputs, *kernel, g),
            Op::ConvTranspose2x2 => self.conv_transpose_backward(inputs, g),
            Op::MaxPool2 { argmax } => {
                let mut dx = vec![0.0; self.value(inputs[0]).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                vec![Some(dx)]
            }
            Op::Relu => {
                let xv = self.value(inputs[0]).data();
                vec![Some(xv.iter().zip(g).map(|(x, gi)| if *x > 0.0 { *gi } else { 0.0 }).collect())]
            }
            Op::BatchNorm { xhat, inv_std, train, .. } => {
                let [n, c, h, w] = self.value(inputs[0]).dims4("batch_norm").expect("checked on forward");
                let hw = h * w;
                let count = (n * hw) as f64;
                let gamma = self.value(inputs[1]).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for idx in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dgamma[ch] += g[idx] * xhat[idx];
                            dbeta[ch] += g[idx];
                            let d = g[idx] * gamma[ch];
                            sum_dxhat[ch] += d;
                            sum_dxhat_xhat[ch] += d * xhat[idx];
                        }
                    }
                }
                let dx = self.wants(inputs[0]).then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            for idx in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                let d = g[idx] * gamma[ch];
                                dx[idx] = if *train {
                                    inv_std[ch] / count
                                        * (count * d - sum_dxhat[ch] - xhat[idx] * sum_dxhat_xhat[ch])
                                } else {
                                    d * inv_std[ch]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }
            Op::Softmax => {
                let y = &node.value;
                let [n, c, h, w] = y.dims4("softmax").expect("checked on forward");
                let hw = h * w;
                let yv = y.data();
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|ch| g[base + ch * hw + p] * yv[base + ch * hw + p]).sum();
                        for ch in 0..c {
                            let k = base + ch * hw + p;
                            dx[k] = yv[k] * (g[k] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Mul => {
                let a = self.value(inputs[0]).data();
                let b = self.value(inputs[1]).data();
                vec![
                    Some(g.iter().zip(b).map(|(x, y)| x * y).collect()),
                    Some(g.iter().zip(a).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale(f) => vec![Some(g.iter().map(|x| x * f).collect())],
            Op::Sum => vec![Some(vec![g[0]; self.value(inputs[0]).len()])],
            Op::Mean => {
                let len = self.value(inputs[0]).len();
                vec![Some(vec![g[0] / len as f64; len])]
            }
            Op::Concat => {
                let [n, total_c, h, w] = node.value.dims4("concat").expect("checked on forward");
                let hw = h * w;
                let mut out: Vec<Vec<f64>> =
                    inputs.iter().map(|p| Vec::with_capacity(self.value(*p).len())).collect();
                for b in 0..n {
                    let mut offset = 0;
                    for (k, p) in inputs.iter().enumerate() {
                        let pc = self.value(*p).shape()[1];
                        let start = (b * total_c + offset) * hw;
                        out[k].extend_from_slice(&g[start..start + pc * hw]);
                        offset += pc;
                    }
                }
                out.into_iter().map(Some).collect()
            }
            Op::Custom(op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|p| self.value(*p)).collect();
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("gradient shape");
                op.backward(&values, &node.value, &gt)
                    .into_iter()
                    .map(|t| t.map(Tensor::into_data))
                    .collect()
            }
        }
    }

    fn conv2d_backward(&self, inputs: &[NodeId], k: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.value(inputs[0]);
        let [n, cin, h, w] = x.dims4("conv2d").expect("checked on forward");
        let wv = self.value(inputs[1]).data();
        let cout = self.value(inputs[2]).len();
        let hw = h * w;
        let patch = cin * k * k;
        let want_x = self.wants(inputs[0]);
        let mut dw = vec![0.0; wv.len()];
        let mut db = vec![0.0; cout];
        let mut dx = want_x.then(|| vec![0.0; x.len()]);
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; patch * hw] };
        let mut dcols = vec![0.0; patch * hw];
        for b in 0..n {
            let xin = &x.data()[b * cin * hw..(b + 1) * cin * hw];
            let gb = &g[b * cout * hw..(b + 1) * cout * hw];
            for (co, plane) in gb.chunks(hw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
            let src = if k == 1 {
                xin
            } else {
                im2col(xin, cin, h, w, k, &mut cols);
                &cols
            };
            gemm(cout, hw, patch, gb, false, src, true, 1.0, &mut dw);
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * cin * hw..(b + 1) * cin * hw];
                if k == 1 {
                    gemm(patch, cout, hw, wv, true, gb, false, 1.0, dxb);
                } else {
                    gemm(patch, cout, hw, wv, true, gb, false, 0.0, &mut dcols);
                    col2im(&dcols, cin, h, w, k, dxb);
                }
            }
        }
        vec![dx, Some(dw), Some(db)]
    }

    fn conv_transpose_backward(&self, inputs: &[NodeId], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.value(inputs[0]);
        let [n, cin, h, w] = x.dims4("conv_transpose2x2").expect("checked on forward");
        let wv = self.value(inputs[1]).data();
        let cout = self.value(inputs[2]).len();
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dw = vec![0.0; wv.len()];
        let mut db = vec![0.0; cout];
        let mut dx = self.wants(inputs[0]).then(|| vec![0.0; x.len()]);
        let mut dy = vec![0.0; cout * 4 * hw];
        for b in 0..n {
            let gb = &g[b * cout * oh * ow..(b + 1) * cout * oh * ow];
            for co in 0..cout {
                for a in 0..2 {
                    for bb in 0..2 {
                        let row = (co * 4 + a * 2 + bb) * hw;
                        for i in 0..h {
                            for j in 0..w {
                                let v = gb[(co * oh + 2 * i + a) * ow + 2 * j + bb];
                                dy[row + i * w + j] = v;
                                db[co] += v;
                            }
                        }
                    }
                }
            }
            let xin = &x.data()[b * cin * hw..(b + 1) * cin * hw];
            gemm(cin, hw, cout * 4, xin, false, &dy, true, 1.0, &mut dw);
            if let Some(dx) = dx.as_mut() {
                gemm(cin, cout * 4, hw, wv, false, &dy, false, 0.0, &mut dx[b * cin * hw..(b + 1) * cin * hw]);
            }
        }
        vec![dx, Some(dw), Some(db)]
    }

    /// Hash of every piecewise-linear branch decision on the tape (ReLU signs and
    /// max-pool winners). Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu => {
                    i.hash(&mut hasher);
                    for v in self.value(node.inputs[0]).data() {
                        (*v > 0.0).hash(&mut hasher);
                    }
                }
                Op::MaxPool2 { argmax } => {
                    i.hash(&mut hasher);
                    argmax.hash(&mut hasher);
                }
                _ => {}
            }
        }
        hasher.finish()
    }

    /// True when some ReLU input is exactly zero or some pooling window has a tied
    /// nonzero maximum (all-zero windows downstream of a ReLU carry no gradient).
    pub fn at_kink(&self) -> bool {
        self.nodes.iter().any(|node| match &node.op {
            Op::Relu => self.value(node.inputs[0]).data().contains(&0.0),
            Op::MaxPool2 { argmax } => {
                let xv = self.value(node.inputs[0]).data();
                let [_, _, _, w] = self.value(node.inputs[0]).dims4("max_pool2").expect("4d");
                argmax.iter().any(|&best| {
                    let (row, col) = (best / w, best % w);
                    let (r0, c0) = (row - row % 2, col - col % 2);
                    [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(di, dj)| (r0 + di) * w + c0 + dj)
                        .filter(|&idx| idx != best)
                        .any(|idx| xv[idx] == xv[best] && xv[best] != 0.0)
                })
            }
            _ => false,
        })
    }
}
