//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are recorded in execution order on a [`Tape`]; each returns a
//! [`Var`] handle. [`Tape::backward`] walks the tape in reverse and
//! accumulates gradients into every leaf created with `requires_grad`.
//! Intermediate gradients are scratch for a single pass, so calling
//! `backward` twice without [`Tape::zero_grad`] doubles the leaf gradients.

use crate::error::{shape_err, Error, Result};
use crate::linalg::{mm, mm_acc, mm_nt, mm_tn, transpose};
use crate::tensor::Tensor;

/// BatchNorm variance stabilizer.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Add { a: Var, b: Var },
    Relu { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    AvgPool { x: Var, k: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    SpatialMean { x: Var },
    Reshape { x: Var },
    ScalarMul { x: Var, s: f64 },
    Mean { x: Var },
    Sum { x: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ClassSelectivity { acts: Var, cache: SelectivityCache },
}

#[derive(Debug)]
struct SelectivityCache {
    /// Class index of each sample after compaction to present classes.
    class_of: Vec<usize>,
    counts: Vec<usize>,
    /// Per-unit partials with respect to each class-conditional mean, `[K × U]`.
    dsi_dmean: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Per-channel statistics of a training-mode batchnorm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the normalized axes.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    freed: bool,
}

fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node { value, requires_grad, grad: None, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Drops intermediate buffers. Leaf values and gradients stay readable;
    /// any further backward pass fails with [`Error::GraphFreed`].
    pub fn release(&mut self) {
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.op = Op::Leaf;
                n.value = Tensor::scalar(0.0);
            }
        }
        self.freed = true;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg, "matmul")
    }

    /// 2-D convolution (cross-correlation) of `x: [N, Cin, H, W]` with
    /// `w: [Cout, Cin, kh, kw]`, zero padding `pad`, optional `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}, stride {stride}"));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err("conv2d", format!("bias {:?} for {cout} channels", self.shape(b)));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, cin, h, w: wd, cout, kh, kw, stride, pad, oh, ow };
        let cols = im2col(self.value(x).data(), &geom);
        let kdim = cin * kh * kw;
        let rows = n * oh * ow;
        let wt = transpose(self.value(w).data(), cout, kdim);
        let omat = mm(&cols, &wt, rows, kdim, cout);
        let mut out = vec![0.0; n * cout * oh * ow];
        let plane = oh * ow;
        for b in 0..n {
            for p in 0..plane {
                let r = b * plane + p;
                for c in 0..cout {
                    out[(b * cout + c) * plane + p] = omat[r * cout + c];
                }
            }
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for b in 0..n {
                for c in 0..cout {
                    out[(b * cout + c) * plane..(b * cout + c + 1) * plane].iter_mut().for_each(|v| *v += bd[c]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        let keep = if self.rg(w) { cols } else { Vec::new() };
        self.push(Tensor::new(vec![n, cout, oh, ow], out)?, Op::Conv2d { x, w, bias, geom, cols: keep }, rg, "conv2d")
    }

    /// Elementwise sum. `b` may also have a shape equal to a suffix of `a`'s
    /// shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return shape_err("add", format!("{sa:?} + {sb:?}"));
        }
        let bd = self.value(b).data();
        let m = bd.len();
        let out: Vec<f64> = self.value(a).data().iter().enumerate().map(|(i, v)| v + bd[i % m]).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(sa, out)?, Op::Add { a, b }, rg, "add")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg, "relu")
    }

    /// Training-mode batchnorm over axis 1 of `[N, C]` or `[N, C, H, W]`
    /// input, normalizing with the batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = channel_layout(&shape).ok_or(Error::Shape { op: "batchnorm", detail: format!("{shape:?}") })?;
        self.check_channel_params(gamma, beta, c)?;
        let xd = self.value(x).data();
        let m = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                mean[ch] += xd[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                var[ch] += xd[base..base + s].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, s);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(Tensor::new(shape, out)?, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, rg, "batchnorm")?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Evaluation-mode batchnorm with fixed running statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = channel_layout(&shape).ok_or(Error::Shape { op: "batchnorm", detail: format!("{shape:?}") })?;
        self.check_channel_params(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return shape_err("batchnorm", "running statistics length");
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, n, c, s);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::new(shape, out)?, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, rg, "batchnorm")
    }

    fn check_channel_params(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batchnorm", format!("affine params {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        (out, xhat)
    }

    /// Non-overlapping `k × k` pooling with stride `k`; trailing rows/columns
    /// that do not fill a window are dropped. Max-pool ties go to the lowest
    /// flat index.
    pub fn pool2d(&mut self, x: Var, k: usize, kind: PoolKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || k == 0 || shape[2] < k || shape[3] < k {
            return shape_err("pool2d", format!("{shape:?} with window {k}"));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / k, w / k);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0; out.len()];
        }
        let inv = 1.0 / (k * k) as f64;
        for plane in 0..n * c {
            let ib = plane * h * w;
            let ob = plane * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ob + oy * ow + ox;
                    match kind {
                        PoolKind::Avg => {
                            let mut acc = 0.0;
                            for dy in 0..k {
                                for dx in 0..k {
                                    acc += xd[ib + (oy * k + dy) * w + ox * k + dx];
                                }
                            }
                            out[o] = acc * inv;
                        }
                        PoolKind::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut bi = 0;
                            for dy in 0..k {
                                for dx in 0..k {
                                    let i = ib + (oy * k + dy) * w + ox * k + dx;
                                    if xd[i] > best || (xd[i] == best && i < bi) {
                                        best = xd[i];
                                        bi = i;
                                    }
                                }
                            }
                            out[o] = best;
                            argmax[o] = bi;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        let op = match kind {
            PoolKind::Avg => Op::AvgPool { x, k },
            PoolKind::Max => Op::MaxPool { x, argmax },
        };
        self.push(Tensor::new(vec![n, c, oh, ow], out)?, op, rg, "pool2d")
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.pool2d(x, k, PoolKind::Avg)
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.pool2d(x, k, PoolKind::Max)
    }

    /// `[N, C, H, W] -> [N, C]` mean over the spatial extent.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return shape_err("spatial_mean", format!("{shape:?}"));
        }
        let s = shape[2] * shape[3];
        let out: Vec<f64> = self.value(x).data().chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![shape[0], shape[1]], out)?, Op::SpatialMean { x }, rg, "spatial_mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape { x }, rg, "reshape")
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::ScalarMul { x, s }, rg, "scalar_mul")
    }

    /// Mean over all elements; returns a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean { x }, rg, "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum { x }, rg, "sum")
    }

    /// Mean softmax cross-entropy of `logits: [N, C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return shape_err("softmax_cross_entropy", format!("logits {shape:?}, {} labels", labels.len()));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / se;
            }
            total += m + se.ln() - row[labels[i]];
        }
        let rg = self.rg(logits);
        self.push(Tensor::scalar(total / n as f64), Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, rg, "softmax_cross_entropy")
    }

    /// Class selectivity index of every unit of `acts: [N, U]`, computed from
    /// class-conditional means over the classes present in `labels`.
    ///
    /// Returns `[U]`. At least two distinct classes must be present.
    pub fn class_selectivity(&mut self, acts: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let shape = self.shape(acts).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return shape_err("class_selectivity", format!("acts {shape:?}, {} labels", labels.len()));
        }
        let (n, u) = (shape[0], shape[1]);
        let mut present: Vec<usize> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        let k = present.len();
        if k < 2 {
            return Err(Error::Invalid(format!("selectivity needs at least 2 classes in the batch, found {k}")));
        }
        let class_of: Vec<usize> = labels.iter().map(|l| present.binary_search(l).expect("present")).collect();
        let mut counts = vec![0usize; k];
        let mut means = vec![0.0; k * u];
        let ad = self.value(acts).data();
        for i in 0..n {
            let ci = class_of[i];
            counts[ci] += 1;
            let row = &ad[i * u..(i + 1) * u];
            means[ci * u..(ci + 1) * u].iter_mut().zip(row).for_each(|(m, a)| *m += a);
        }
        for ci in 0..k {
            let inv = 1.0 / counts[ci] as f64;
            means[ci * u..(ci + 1) * u].iter_mut().for_each(|m| *m *= inv);
        }
        let mut si = vec![0.0; u];
        let mut dsi_dmean = vec![0.0; k * u];
        let rest = (k - 1) as f64;
        for j in 0..u {
            let (mut best, mut bi) = (means[j], 0);
            let mut total = 0.0;
            for ci in 0..k {
                let v = means[ci * u + j];
                total += v;
                if v > best {
                    best = v;
                    bi = ci;
                }
            }
            let others = (total - best) / rest;
            let den = best + others + eps;
            if den > 0.0 {
                si[j] = (best - others) / den;
                let d_max = (2.0 * others + eps) / (den * den);
                let d_rest = -(2.0 * best + eps) / (den * den) / rest;
                for ci in 0..k {
                    dsi_dmean[ci * u + j] = if ci == bi { d_max } else { d_rest };
                }
            }
        }
        let rg = self.rg(acts);
        let cache = SelectivityCache { class_of, counts, dsi_dmean };
        self.push(Tensor::new(vec![u], si)?, Op::ClassSelectivity { acts, cache }, rg, "class_selectivity")
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Vector-Jacobian product: backpropagates the cotangent `seed` (same
    /// length as `out`) and accumulates into leaf gradients.
    pub fn backward_with_seed(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        if self.freed {
            return Err(Error::GraphFreed);
        }
        if seed.len() != self.value(out).len() {
            return shape_err("backward", format!("seed of {} for output of {}", seed.len(), self.value(out).len()));
        }
        if !self.rg(out) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, gi) in self.local_backward(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward".into()));
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    out.push((*a, mm_nt(g, self.value(*b).data(), m, n, k)));
                }
                if self.rg(*b) {
                    out.push((*b, mm_tn(self.value(*a).data(), g, m, k, n)));
                }
            }
            Op::Conv2d { x, w, bias, geom, cols } => {
                let ConvGeom { n, cout, oh, ow, cin, kh, kw, .. } = *geom;
                let plane = oh * ow;
                let rows = n * plane;
                let kdim = cin * kh * kw;
                let mut gmat = vec![0.0; rows * cout];
                for b in 0..n {
                    for c in 0..cout {
                        let src = &g[(b * cout + c) * plane..(b * cout + c + 1) * plane];
                        for (p, &v) in src.iter().enumerate() {
                            gmat[(b * plane + p) * cout + c] = v;
                        }
                    }
                }
                if let Some(bv) = bias {
                    if self.rg(*bv) {
                        let mut gb = vec![0.0; cout];
                        for r in 0..rows {
                            for c in 0..cout {
                                gb[c] += gmat[r * cout + c];
                            }
                        }
                        out.push((*bv, gb));
                    }
                }
                if self.rg(*w) {
                    let gwt = mm_tn(cols, &gmat, rows, kdim, cout);
                    out.push((*w, transpose(&gwt, kdim, cout)));
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; rows * kdim];
                    mm_acc(&gmat, self.value(*w).data(), &mut dcols, rows, cout, kdim);
                    out.push((*x, col2im(&dcols, geom)));
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*b) {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for (j, v) in g.iter().enumerate() {
                        gb[j % m] += v;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                out.push((*x, g.iter().zip(xd).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect()));
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (n, c, s) = channel_layout(self.shape(*x)).expect("bn layout");
                let gd = self.value(*gamma).data();
                let m = (n * s) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for k in base..base + s {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            let scale = gd[ch] * inv_std[ch] / m;
                            for k in base..base + s {
                                dx[k] = scale * (m * g[k] - sum_g[ch] - xhat[k] * sum_gx[ch]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.rg(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let (n, c, s) = channel_layout(self.shape(*x)).expect("bn layout");
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        let scale = gd[ch] * inv_std[ch];
                        for k in base..base + s {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                            dx[k] = g[k] * scale;
                        }
                    }
                }
                if self.rg(*x) {
                    out.push((*x, dx));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.rg(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::AvgPool { x, k } => {
                let xs = self.shape(*x);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; self.value(*x).len()];
                for plane in 0..xs[0] * xs[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[plane * oh * ow + oy * ow + ox] * inv;
                            for dy in 0..*k {
                                for dxx in 0..*k {
                                    dx[plane * h * w + (oy * k + dy) * w + ox * k + dxx] += gv;
                                }
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                out.push((*x, dx));
            }
            Op::SpatialMean { x } => {
                let xs = self.shape(*x);
                let s = xs[2] * xs[3];
                let inv = 1.0 / s as f64;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (p, chunk) in dx.chunks_mut(s).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = g[p] * inv);
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::ScalarMul { x, s } => out.push((*x, g.iter().map(|v| v * s).collect())),
            Op::Mean { x } => {
                let n = self.value(*x).len();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Sum { x } => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let n = labels.len();
                let scale = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * c + l] -= scale;
                }
                out.push((*logits, dz));
            }
            Op::ClassSelectivity { acts, cache } => {
                let u = self.shape(*acts)[1];
                let mut da = vec![0.0; self.value(*acts).len()];
                for (i, &ci) in cache.class_of.iter().enumerate() {
                    let inv = 1.0 / cache.counts[ci] as f64;
                    let d = &cache.dsi_dmean[ci * u..(ci + 1) * u];
                    for j in 0..u {
                        da[i * u + j] = g[j] * d[j] * inv;
                    }
                }
                out.push((*acts, da));
            }
        }
        out
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kdim = g.cin * g.kh * g.kw;
    let plane = g.oh * g.ow;
    let mut cols = vec![0.0; g.n * plane * kdim];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (b * plane + oy * g.ow + ox) * kdim;
                for c in 0..g.cin {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[row + (c * g.kh + ky) * g.kw + kx] = x[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kdim = g.cin * g.kh * g.kw;
    let plane = g.oh * g.ow;
    let mut x = vec![0.0; g.n * g.cin * g.h * g.w];
    for b in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (b * plane + oy * g.ow + ox) * kdim;
                for c in 0..g.cin {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            x[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize] += cols[row + (c * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    x
}
