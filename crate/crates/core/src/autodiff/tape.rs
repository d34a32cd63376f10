//! The computation record: every differentiable primitive appends a node,
//! and [`Tape::backward`] walks the nodes in exact reverse order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise function with a caller-supplied derivative.
#[derive(Clone, Copy)]
pub struct Elementwise {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var },
    Add { x: Var, y: Var },
    Mul { x: Var, y: Var },
    MulScalar { x: Var, c: f64 },
    Concat { x: Var, y: Var },
    Reshape { x: Var },
    Pad2d { x: Var },
    Crop2d { x: Var },
    Gather { x: Var, index: Vec<usize> },
    Map { x: Var, func: Elementwise },
    Sum { x: Var },
    Mean { x: Var },
    SoftmaxRows { x: Var },
    CrossEntropyRows { p: Var, targets: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, probs: Var, targets: Vec<usize> },
    BceWithLogits { x: Var, target: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu { .. } => "relu",
            Op::MaxPool { .. } => "maxpool2x2",
            Op::Upsample { .. } => "upsample2x",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Concat { .. } => "concat_channels",
            Op::Reshape { .. } => "reshape",
            Op::Pad2d { .. } => "pad2d",
            Op::Crop2d { .. } => "crop2d",
            Op::Gather { .. } => "gather",
            Op::Map { func, .. } => func.name,
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::CrossEntropyRows { .. } => "cross_entropy_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A single-threaded computation record. Batch-level inner loops of the
/// primitives may run in parallel according to the tape's [`Exec`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false, exec }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes and gradients so the tape can record a new step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    /// Adds an input. Gradients are only propagated toward leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`; `None` when no
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the right shape.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// Names of the recorded primitives in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Hash of every piecewise branch taken (ReLU activity and max-pool
    /// winners). Two evaluations with equal signatures lie on the same smooth
    /// piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation of `x [B,C,H,W]` with `w [K,C,kh,kw]` plus bias `b [K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize, stride: usize) -> Result<Var> {
        let [batch, c, h, wd] = self.value(x).dims4("conv2d input")?;
        let [k, wc, kh, kw] = self.value(w).dims4("conv2d weight")?;
        if wc != c {
            return Err(Error::Shape(format!("conv2d: input has {c} channels, weight expects {wc}")));
        }
        if self.shape(b) != [k] {
            return Err(Error::Shape(format!("conv2d: bias shape {:?}, expected [{k}]", self.shape(b))));
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} must be odd, stride ≥ 1")));
        }
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Shape(format!(
                "conv2d: {h}x{wd} input with pad {pad}, kernel {kh}x{kw}, stride {stride} is not integral"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_ch: c,
            out_ch: k,
            h,
            w: wd,
            kh,
            kw,
            pad,
            stride,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let out = conv2d_forward(
            self.exec,
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(&[batch, k, geom.oh, geom.ow], out)?;
        self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push(value, Op::Relu { x }, &[x])
    }

    /// 2×2 max pooling with stride 2; ties go to the first position in
    /// row-major window order.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("maxpool input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("maxpool2x2 needs even spatial size, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        self.push(value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("upsample input")?;
        let xd = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * oh * ow];
        for plane in 0..b * c {
            for oy in 0..oh {
                let src = &xd[plane * h * w + (oy / 2) * w..][..w];
                let dst = &mut out[plane * oh * ow + oy * ow..][..ow];
                for (ox, v) in dst.iter_mut().enumerate() {
                    *v = src[ox / 2];
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        self.push(value, Op::Upsample { x }, &[x])
    }

    fn same_shape(&self, x: Var, y: Var, what: &str) -> Result<()> {
        if self.shape(x) != self.shape(y) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(x), self.shape(y))));
        }
        Ok(())
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        self.same_shape(x, y, "add")?;
        let (a, b) = (self.value(x), self.value(y));
        let value = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect())?;
        self.push(value, Op::Add { x, y }, &[x, y])
    }

    /// Elementwise product.
    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        self.same_shape(x, y, "mul")?;
        let (a, b) = (self.value(x), self.value(y));
        let value = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect())?;
        self.push(value, Op::Mul { x, y }, &[x, y])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let a = self.value(x);
        let value = Tensor::new(a.shape(), a.data().iter().map(|v| v * c).collect())?;
        self.push(value, Op::MulScalar { x, c }, &[x])
    }

    /// Concatenates `[B,C1,H,W]` and `[B,C2,H,W]` along channels.
    pub fn concat_channels(&mut self, x: Var, y: Var) -> Result<Var> {
        let [b, c1, h, w] = self.value(x).dims4("concat lhs")?;
        let [b2, c2, h2, w2] = self.value(y).dims4("concat rhs")?;
        if (b, h, w) != (b2, h2, w2) {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} vs {:?}",
                self.shape(x),
                self.shape(y)
            )));
        }
        let (xd, yd) = (self.value(x).data(), self.value(y).data());
        let (px, py) = (c1 * h * w, c2 * h * w);
        let mut out = Vec::with_capacity(b * (px + py));
        for i in 0..b {
            out.extend_from_slice(&xd[i * px..(i + 1) * px]);
            out.extend_from_slice(&yd[i * py..(i + 1) * py]);
        }
        let value = Tensor::new(&[b, c1 + c2, h, w], out)?;
        self.push(value, Op::Concat { x, y }, &[x, y])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Zero-pads the bottom and right of a `[B,C,H,W]` tensor to `h × w`.
    pub fn pad2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [b, c, ih, iw] = self.value(x).dims4("pad2d input")?;
        if h < ih || w < iw {
            return Err(Error::Shape(format!("pad2d: cannot pad {ih}x{iw} to {h}x{w}")));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * h * w];
        for plane in 0..b * c {
            for y in 0..ih {
                out[plane * h * w + y * w..][..iw].copy_from_slice(&xd[plane * ih * iw + y * iw..][..iw]);
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        self.push(value, Op::Pad2d { x }, &[x])
    }

    /// Keeps the top-left `h × w` window of a `[B,C,H,W]` tensor.
    pub fn crop2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [b, c, ih, iw] = self.value(x).dims4("crop2d input")?;
        if h > ih || w > iw {
            return Err(Error::Shape(format!("crop2d: cannot crop {ih}x{iw} to {h}x{w}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * h * w);
        for plane in 0..b * c {
            for y in 0..h {
                out.extend_from_slice(&xd[plane * ih * iw + y * iw..][..w]);
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        self.push(value, Op::Crop2d { x }, &[x])
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Backward is a
    /// scatter-add.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::Shape(format!("gather index {bad} outside {} elements", xd.len())));
        }
        let value = Tensor::new(shape, index.iter().map(|&i| xd[i]).collect())?;
        self.push(value, Op::Gather { x, index }, &[x])
    }

    pub fn map(&mut self, x: Var, func: Elementwise) -> Result<Var> {
        let a = self.value(x);
        let value = Tensor::new(a.shape(), a.data().iter().map(|&v| (func.f)(v)).collect())?;
        self.push(value, Op::Map { x, func }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    fn rows(&self, x: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        match shape.last() {
            Some(&m) if m > 0 => Ok((self.value(x).numel() / m, m)),
            _ => Err(Error::Shape(format!("row operation on shape {shape:?}"))),
        }
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.rows(x)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - mx).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(value, Op::SoftmaxRows { x }, &[x])
    }

    /// Mean over rows of `−ln p[target]`, targets 1-based. When `p` comes
    /// straight from [`Tape::softmax_rows`] the loss is evaluated from the
    /// logits and the backward pass is the fused `(p − onehot)/rows`.
    pub fn cross_entropy_rows(&mut self, p: Var, targets: &[usize]) -> Result<Var> {
        let (rows, m) = self.rows(p)?;
        if targets.len() != rows {
            return Err(Error::Shape(format!("{} targets for {rows} rows", targets.len())));
        }
        if let Some((line, &index)) = targets.iter().enumerate().find(|(_, &t)| t < 1 || t > m) {
            return Err(Error::IndexOutOfRange { line, index, max: m });
        }
        let targets = targets.to_vec();
        if let Op::SoftmaxRows { x: logits } = self.nodes[p.0].op {
            let xd = self.value(logits).data();
            let mut total = 0.0;
            for (row, &t) in xd.chunks(m).zip(&targets) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                total += lse - row[t - 1];
            }
            let value = Tensor::scalar(total / rows as f64);
            return self.push(value, Op::SoftmaxCrossEntropy { logits, probs: p, targets }, &[logits]);
        }
        let pd = self.value(p).data();
        let total: f64 = pd.chunks(m).zip(&targets).map(|(row, &t)| -row[t - 1].ln()).sum();
        let value = Tensor::scalar(total / rows as f64);
        self.push(value, Op::CrossEntropyRows { p, targets }, &[p])
    }

    /// Mean binary cross-entropy of `sigmoid(x)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let xd = self.value(x).data();
        if target.len() != xd.len() {
            return Err(Error::Shape(format!("{} targets for {} logits", target.len(), xd.len())));
        }
        let total: f64 = xd
            .iter()
            .zip(target)
            .map(|(&v, &y)| v.max(0.0) - v * y + (-v.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / xd.len() as f64);
        self.push(value, Op::BceWithLogits { x, target: target.to_vec() }, &[x])
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a one-element `loss`. Consumes the record: a second
    /// call fails until [`Tape::clear`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, geom } => {
                    let r = conv2d_backward(
                        self.exec,
                        geom,
                        val(x).data(),
                        val(w).data(),
                        gy.data(),
                        needs(x),
                        needs(w) || needs(b),
                    );
                    if let Some(dx) = r.dx {
                        Self::accumulate(&mut grads, *x, Tensor::new(val(x).shape(), dx)?);
                    }
                    if needs(w) {
                        if let Some(dw) = r.dw {
                            Self::accumulate(&mut grads, *w, Tensor::new(val(w).shape(), dw)?);
                        }
                    }
                    if needs(b) {
                        if let Some(db) = r.db {
                            Self::accumulate(&mut grads, *b, Tensor::new(val(b).shape(), db)?);
                        }
                    }
                }
                Op::Relu { x } => {
                    let g = val(x).data().iter().zip(gy.data()).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 });
                    Self::accumulate(&mut grads, *x, Tensor::new(val(x).shape(), g.collect())?);
                }
                Op::MaxPool { x, argmax } => {
                    let mut g = Tensor::zeros(val(x).shape());
                    let gd = g.data_mut();
                    for (&i, &d) in argmax.iter().zip(gy.data()) {
                        gd[i] += d;
                    }
                    Self::accumulate(&mut grads, *x, g);
                }
                Op::Upsample { x } => {
                    let [b, c, h, w] = val(x).dims4("upsample input")?;
                    let (oh, ow) = (2 * h, 2 * w);
                    let gyd = gy.data();
                    let mut g = vec![0.0; b * c * h * w];
                    for plane in 0..b * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                g[plane * h * w + (oy / 2) * w + ox / 2] += gyd[plane * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *x, Tensor::new(val(x).shape(), g)?);
                }
                Op::Add { x, y } => {
                    if needs(y) {
                        Self::accumulate(&mut grads, *y, gy.clone());
                    }
                    if needs(x) {
                        Self::accumulate(&mut grads, *x, gy.clone());
                    }
                }
                Op::Mul { x, y } => {
                    let (xd, yd) = (val(x).data(), val(y).data());
                    if needs(x) {
                        let g = gy.data().iter().zip(yd).map(|(d, v)| d * v).collect();
                        Self::accumulate(&mut grads, *x, Tensor::new(gy.shape(), g)?);
                    }
                    if needs(y) {
                        let g = gy.data().iter().zip(xd).map(|(d, v)| d * v).collect();
                        Self::accumulate(&mut grads, *y, Tensor::new(gy.shape(), g)?);
                    }
                }
                Op::MulScalar { x, c } => {
                    let g = gy.data().iter().map(|d| d * c).collect();
                    Self::accumulate(&mut grads, *x, Tensor::new(gy.shape(), g)?);
                }
                Op::Concat { x, y } => {
                    let [b, c1, h, w] = val(x).dims4("concat lhs")?;
                    let c2 = val(y).shape()[1];
                    let (px, py) = (c1 * h * w, c2 * h * w);
                    let gyd = gy.data();
                    if needs(x) {
                        let mut g = Vec::with_capacity(b * px);
                        for i in 0..b {
                            g.extend_from_slice(&gyd[i * (px + py)..][..px]);
                        }
                        Self::accumulate(&mut grads, *x, Tensor::new(val(x).shape(), g)?);
                    }
                    if needs(y) {
                        let mut g = Vec::with_capacity(b * py);
                        for i in 0..b {
                            g.extend_from_slice(&gyd[i * (px + py) + px..][..py]);
                        }
                        Self::accumulate(&mut grads, *y, Tensor::new(val(y).shape(), g)?);
                    }
                }
                Op::Reshape { x } => {
                    let g = gy.clone().reshaped(val(x).shape())?;
                    Self::accumulate(&mut grads, *x, g);
                }
                Op::Pad2d { x } => {
                    let [b, c, ih, iw] = val(x).dims4("pad2d input")?;
                    let [_, _, h, w] = gy.dims4("pad2d grad")?;
                    let gyd = gy.data();
                    let mut g = Vec::with_capacity(b * c * ih * iw);
                    for plane in 0..b * c {
                        for y in 0..ih {
                            g.extend_from_slice(&gyd[plane * h * w + y * w..][..iw]);
                        }
                    }
                    Self::accumulate(&mut grads, *x, Tensor::new(val(x).shape(), g)?);
                }
                Op::Crop2d { x } => {
                    let [b, c, ih, iw] = val(x).dims4("crop2d input")?;
                    let [_, _, h, w] = gy.dims4("crop2d grad")?;
                    let gyd = gy.data();
                    let mut g = vec![0.0; b * c * ih * iw];
                    for plane in 0..b * c {
                        for y in 0..h {
                            g[plane * ih * iw + y * iw..][..w].copy_from_slice(&gyd[plane * h * w + y * w..][..w]);
                        }
                    }
                    Self::accumulate(&mut grads, *x, Tensor::new(val(x).shape(), g)?);
                }
                Op::Gather { x, index } => {
                    let mut g = Tensor::zeros(val(x).shape());
                    crate::warp::scatter_add(gy.data(), index, g.data_mut())?;
                    Self::accumulate(&mut grads, *x, g);
                }
                Op::Map { x, func } => {
                    let g = val(x).data().iter().zip(gy.data()).map(|(&v, &d)| d * (func.df)(v)).collect();
                    Self::accumulate(&mut grads, *x, Tensor::new(gy.shape(), g)?);
                }
                Op::Sum { x } => {
                    let d = gy.item();
                    Self::accumulate(&mut grads, *x, Tensor::full(val(x).shape(), d));
                }
                Op::Mean { x } => {
                    let d = gy.item() / val(x).numel() as f64;
                    Self::accumulate(&mut grads, *x, Tensor::full(val(x).shape(), d));
                }
                Op::SoftmaxRows { x } => {
                    let p = node.value.data();
                    let m = *node.value.shape().last().unwrap();
                    let mut g = Vec::with_capacity(p.len());
                    for (pr, dr) in p.chunks(m).zip(gy.data().chunks(m)) {
                        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        g.extend(pr.iter().zip(dr).map(|(a, b)| a * (b - dot)));
                    }
                    Self::accumulate(&mut grads, *x, Tensor::new(val(x).shape(), g)?);
                }
                Op::CrossEntropyRows { p, targets } => {
                    let pv = val(p);
                    let m = *pv.shape().last().unwrap();
                    let scale = gy.item() / targets.len() as f64;
                    let mut g = Tensor::zeros(pv.shape());
                    let gd = g.data_mut();
                    for (r, &t) in targets.iter().enumerate() {
                        gd[r * m + t - 1] = -scale / pv.data()[r * m + t - 1];
                    }
                    Self::accumulate(&mut grads, *p, g);
                }
                Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                    let pv = val(probs);
                    let m = *pv.shape().last().unwrap();
                    let scale = gy.item() / targets.len() as f64;
                    let mut g: Vec<f64> = pv.data().iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        g[r * m + t - 1] -= scale;
                    }
                    Self::accumulate(&mut grads, *logits, Tensor::new(val(logits).shape(), g)?);
                }
                Op::BceWithLogits { x, target } => {
                    let scale = gy.item() / target.len() as f64;
                    let g = val(x)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&v, &y)| scale * (sigmoid(v) - y))
                        .collect();
                    Self::accumulate(&mut grads, *x, Tensor::new(val(x).shape(), g)?);
                }
            }
            grads[id] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
