//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order, so reverse
//! iteration is a valid topological order for the backward sweep. Parameters
//! enter through [`Tape::param`], which remembers the binding so gradients
//! can be accumulated back into the owning [`ParamStore`].

use super::kernels::{self, ConvGeom};
use super::{gemm, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Conv { x: Var, w: Var, geom: ConvGeom },
    AvgPool3(Var),
    Relu(Var),
    Erf(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Scale(Var, f64),
    Sum(Var),
    /// Output value holds the normalized activations.
    BatchNormalize { x: Var, inv_std: Vec<f64> },
    FixedNormalize { x: Var, inv_std: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
}

/// Result of a backward sweep: one optional gradient buffer per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Add the gradient of every bound, trainable parameter into its
    /// `tensor.grad` buffer. Returns the touched ids in binding order.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore) -> Vec<ParamId> {
        let mut touched = Vec::new();
        for &(var, id) in &tape.bindings {
            let Some(g) = self.get(var) else { continue };
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            match &mut p.tensor.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.to_vec()),
            }
            if !touched.contains(&id) {
                touched.push(id);
            }
        }
        touched
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn nchw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

fn channels(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.shape().len() < 2 {
        return Err(Error::shape(op, format!("expected [N,C,...], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.spatial()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameters bound on this tape, in first-use order.
    pub fn bound_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for &(_, id) in &self.bindings {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        ids
    }

    /// First tape variable bound to a parameter.
    pub fn binding(&self, id: ParamId) -> Option<Var> {
        self.bindings.iter().find(|&&(_, p)| p == id).map(|&(v, _)| v)
    }

    /// Multiply-accumulates performed by the recorded matmul, convolution,
    /// and 3x3 average-pool nodes (one per pooled input element).
    pub fn mac_count(&self) -> u64 {
        self.nodes
            .iter()
            .map(|node| match &node.op {
                Op::MatMul(a, _) => (node.value.numel() * self.value(*a).shape()[1]) as u64,
                Op::Conv { geom, .. } => (node.value.numel() * geom.c * geom.k * geom.k) as u64,
                Op::AvgPool3(_) => 9 * node.value.numel() as u64,
                _ => 0,
            })
            .sum()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// A leaf whose gradient is wanted (inputs under test, probes).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    /// Bind a stored parameter; frozen parameters do not request gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        let mut value = p.tensor.clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf, p.trainable, &p.name)?;
        self.bindings.push((v, id));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg, "add")
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::invalid("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `[N, F] + [F]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, f) = matrix_dims(self.value(x), "add_bias")?;
        if self.value(bias).numel() != f {
            return Err(Error::shape("add_bias", format!("[{n},{f}] + {:?}", self.value(bias).shape())));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(f) {
            row.iter_mut().zip(&b).for_each(|(v, bi)| *v += bi);
        }
        let rg = self.rg(&[x, bias]);
        self.push(Tensor::new(vec![n, f], data)?, Op::AddBias(x, bias), rg, "add_bias")
    }

    /// `x · w + b` with `w` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Stride-1, same-padded cross-correlation; `k` must be 1 or 3.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let k = self.value(w).shape().get(2).copied().unwrap_or(0);
        if k != 1 && k != 3 {
            return Err(Error::invalid(format!("conv2d: unsupported kernel size {k}")));
        }
        self.conv2d_strided(x, w, 1)
    }

    /// Cross-correlation with padding `k/2` and the given stride (odd `k`).
    pub fn conv2d_strided(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = nchw(self.value(x), "conv2d")?;
        let (f, c2, k, k2) = nchw(self.value(w), "conv2d")?;
        if c != c2 || k != k2 || k % 2 == 0 || stride == 0 || c == 0 || f == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} kernel {:?} stride {stride}", self.value(x).shape(), self.value(w).shape()),
            ));
        }
        let geom = ConvGeom { n, c, h, w: wd, f, k, stride, pad: k / 2 };
        let out = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let shape = vec![n, f, geom.out_h(), geom.out_w()];
        let rg = self.rg(&[x, w]);
        self.push(Tensor::new(shape, out)?, Op::Conv { x, w, geom }, rg, "conv2d")
    }

    /// 3×3 mean pooling, stride 1, zero padding, divisor 9.
    pub fn avg_pool3x3(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "avg_pool3x3")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("avg_pool3x3", "empty spatial extent"));
        }
        let mut out = vec![0.0; n * c * h * w];
        kernels::avg_pool3(n * c, h, w, self.value(x).data(), &mut out);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c, h, w], out)?, Op::AvgPool3(x), rg, "avg_pool3x3")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn erf(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| libm::erf(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Erf(x), rg, "erf")
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.value(x), "global_avg_pool")?;
        let s = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / s)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool(x), rg, "global_avg_pool")
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let rest = t.numel() / n.max(1);
        let out = t.clone().reshape(vec![n, rest])?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg, "flatten")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Per-channel standardization with the statistics of this batch.
    /// Returns the normalized node plus the batch mean and biased variance.
    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, sp) = channels(self.value(x), "batch_normalize")?;
        if n < 2 {
            return Err(Error::invalid(format!("batch_normalize: batch of {n} < 2")));
        }
        let xd = self.value(x).data();
        let (mean, var) = kernels::channel_moments(n, c, sp, xd);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xd.len()];
        kernels::for_each_channel(n, c, sp, |ch, r| {
            for i in r {
                out[i] = (xd[i] - mean[ch]) * inv_std[ch];
            }
        });
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        let v = self.push(Tensor::new(shape, out)?, Op::BatchNormalize { x, inv_std }, rg, "batch_normalize")?;
        Ok((v, mean, var))
    }

    /// Standardization with externally supplied statistics (not differentiated).
    pub fn fixed_normalize(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (n, c, sp) = channels(self.value(x), "fixed_normalize")?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("fixed_normalize", format!("{c} channels, {} stats", mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        kernels::for_each_channel(n, c, sp, |ch, r| {
            for i in r {
                out[i] = (xd[i] - mean[ch]) * inv_std[ch];
            }
        });
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::FixedNormalize { x, inv_std }, rg, "fixed_normalize")
    }

    /// `gamma[c] * x + beta[c]` per channel.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, sp) = channels(self.value(x), "channel_affine")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("channel_affine", format!("{c} channels")));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        kernels::for_each_channel(n, c, sp, |ch, r| {
            for i in r {
                out[i] = g[ch] * xd[i] + b[ch];
            }
        });
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::new(shape, out)?, Op::ChannelAffine { x, gamma, beta }, rg, "channel_affine")
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = matrix_dims(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{n} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(k, self.value(logits).data());
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * k + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(&[logits]);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, rg, "softmax_cross_entropy")
    }

    /// `(1 / 2N) Σ (pred − target)²` for a prediction of `N` values.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::shape("mse", format!("{} predictions, {} targets", p.len(), target.len())));
        }
        let n = p.len() as f64;
        let loss = p.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * n);
        let rg = self.rg(&[pred]);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.to_vec() }, rg, "mse")
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Vector-Jacobian product: propagate `seed` (same size as `out`) backward.
    pub fn backward_seeded(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::shape("backward", "seed size differs from output"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *slot = None;
            } else if let Some(g) = slot {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(self.value(*a), "").unwrap();
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let bd = self.value(*b).data();
                    acc(*a, &mut |ga| gemm(m, n, k, 1.0, g, false, bd, true, 1.0, ga));
                }
                if self.wants(*b) {
                    let ad = self.value(*a).data();
                    acc(*b, &mut |gb| gemm(k, m, n, 1.0, ad, true, g, false, 1.0, gb));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        acc(v, &mut |gv| gv.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                }
                if self.wants(*bias) {
                    let f = self.value(*bias).numel();
                    acc(*bias, &mut |gb| {
                        for row in g.chunks(f) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::Conv { x, w, geom } => {
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut dx = want_x.then(|| vec![0.0; xd.len()]);
                let mut dw = want_w.then(|| vec![0.0; wd.len()]);
                kernels::conv_backward(geom, xd, wd, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, &mut |gx| gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |gw| gw.iter_mut().zip(&dw).for_each(|(a, b)| *a += b));
                }
            }
            Op::AvgPool3(x) => {
                if self.wants(*x) {
                    let s = self.value(*x).shape();
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    acc(*x, &mut |gx| kernels::avg_pool3(planes, h, w, g, gx));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    acc(*x, &mut |gx| {
                        for ((a, &xi), gi) in gx.iter_mut().zip(xd).zip(g) {
                            if xi > 0.0 {
                                *a += gi;
                            }
                        }
                    });
                }
            }
            Op::Erf(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let c = 2.0 / std::f64::consts::PI.sqrt();
                    acc(*x, &mut |gx| {
                        for ((a, &xi), gi) in gx.iter_mut().zip(xd).zip(g) {
                            *a += gi * c * (-xi * xi).exp();
                        }
                    });
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let s = self.value(*x).shape();
                    let plane = s[2] * s[3];
                    acc(*x, &mut |gx| {
                        for (chunk, gi) in gx.chunks_mut(plane).zip(g) {
                            chunk.iter_mut().for_each(|a| *a += gi / plane as f64);
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b));
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
                }
            }
            Op::BatchNormalize { x, inv_std } => {
                if self.wants(*x) {
                    let t = self.value(*x);
                    let (n, c, sp) = (t.shape()[0], t.shape()[1], t.spatial());
                    let yhat = self.nodes[i].value.data();
                    let m = (n * sp) as f64;
                    let mut mean_g = vec![0.0; c];
                    let mut mean_gy = vec![0.0; c];
                    kernels::for_each_channel(n, c, sp, |ch, r| {
                        for j in r {
                            mean_g[ch] += g[j];
                            mean_gy[ch] += g[j] * yhat[j];
                        }
                    });
                    mean_g.iter_mut().for_each(|v| *v /= m);
                    mean_gy.iter_mut().for_each(|v| *v /= m);
                    acc(*x, &mut |gx| {
                        kernels::for_each_channel(n, c, sp, |ch, r| {
                            for j in r {
                                gx[j] += inv_std[ch] * (g[j] - mean_g[ch] - yhat[j] * mean_gy[ch]);
                            }
                        });
                    });
                }
            }
            Op::FixedNormalize { x, inv_std } => {
                if self.wants(*x) {
                    let t = self.value(*x);
                    let (n, c, sp) = (t.shape()[0], t.shape()[1], t.spatial());
                    acc(*x, &mut |gx| {
                        kernels::for_each_channel(n, c, sp, |ch, r| {
                            for j in r {
                                gx[j] += inv_std[ch] * g[j];
                            }
                        });
                    });
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let t = self.value(*x);
                let (n, c, sp) = (t.shape()[0], t.shape()[1], t.spatial());
                let xd = t.data();
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    acc(*x, &mut |gx| {
                        kernels::for_each_channel(n, c, sp, |ch, r| {
                            for j in r {
                                gx[j] += gam[ch] * g[j];
                            }
                        });
                    });
                }
                if self.wants(*gamma) {
                    acc(*gamma, &mut |gg| {
                        kernels::for_each_channel(n, c, sp, |ch, r| {
                            for j in r {
                                gg[ch] += g[j] * xd[j];
                            }
                        });
                    });
                }
                if self.wants(*beta) {
                    acc(*beta, &mut |gb| {
                        kernels::for_each_channel(n, c, sp, |ch, r| {
                            for j in r {
                                gb[ch] += g[j];
                            }
                        });
                    });
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let k = self.value(*logits).shape()[1];
                    let n = labels.len() as f64;
                    acc(*logits, &mut |gl| {
                        for (row, &l) in labels.iter().enumerate() {
                            for j in 0..k {
                                let target = if j == l { 1.0 } else { 0.0 };
                                gl[row * k + j] += g[0] * (probs[row * k + j] - target) / n;
                            }
                        }
                    });
                }
            }
            Op::Mse { pred, target } => {
                if self.wants(*pred) {
                    let p = self.value(*pred).data();
                    let n = p.len() as f64;
                    acc(*pred, &mut |gp| {
                        for ((a, pi), ti) in gp.iter_mut().zip(p).zip(target) {
                            *a += g[0] * (pi - ti) / n;
                        }
                    });
                }
            }
        }
    }
}

/// Row-wise numerically stable softmax of a `[N, K]` buffer.
pub fn softmax_rows(k: usize, logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}
