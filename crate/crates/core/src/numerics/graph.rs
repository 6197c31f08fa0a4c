//! Reverse-mode differentiation over a per-step expression graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. A fresh graph
//! is built for every forward pass.

use super::batchnorm::{bn_apply, bn_dims, channel_stats};
use super::ops::{self, ConvGeometry};
use super::tensor::{Real, Tensor};
use crate::error::{OqatError, Result};
use crate::quantizer::{self, QRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv { input: NodeId, weight: NodeId, geom: ConvGeometry },
    Linear { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, stats: Option<(Vec<T>, Vec<T>)> },
    Relu { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sum { input: NodeId },
    GlobalAvgPool { input: NodeId },
    FakeQuant { input: NodeId, step: NodeId, range: QRange, grad_scale: T },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the node did not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf (data); never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `id` cut off from the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.input(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, padding: usize, groups: usize) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let geom = ConvGeometry::infer(x.shape(), w.shape(), stride, padding, groups)?;
        let mut out = vec![T::zero(); geom.batch * geom.out_channels * geom.out_h * geom.out_w];
        ops::conv2d_raw(&geom, x.data(), w.data(), &mut out);
        let value = Tensor::new(vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(value, Op::Conv { input, weight, geom }, rg))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let value = ops::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// BatchNorm using batch statistics (training mode and calibration).
    pub fn batchnorm_train(&mut self, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (n, c, plane) = self.bn_check(input, gamma, beta)?;
        let x = self.value(input).data();
        let (mean, var) = channel_stats(x, n, c, plane);
        let (y, xhat, inv_std) =
            bn_apply(x, n, c, plane, &mean, &var, self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::new(self.value(input).shape().to_vec(), y)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, stats: Some((mean, var)) }, rg))
    }

    /// BatchNorm using fixed running statistics.
    pub fn batchnorm_eval(&mut self, input: NodeId, gamma: NodeId, beta: NodeId, mean: &[T], var: &[T]) -> Result<NodeId> {
        let (n, c, plane) = self.bn_check(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(OqatError::Shape(format!(
                "batchnorm running stats have {} / {} channels, input has {}",
                mean.len(),
                var.len(),
                c
            )));
        }
        let x = self.value(input).data();
        let (y, xhat, inv_std) =
            bn_apply(x, n, c, plane, mean, var, self.value(gamma).data(), self.value(beta).data());
        let value = Tensor::new(self.value(input).shape().to_vec(), y)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, stats: None }, rg))
    }

    fn bn_check(&self, input: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize)> {
        let (n, c, plane) = bn_dims(self.value(input).shape())?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(OqatError::Shape(format!(
                "batchnorm affine params have {} / {} channels, input {:?}",
                self.value(gamma).numel(),
                self.value(beta).numel(),
                self.value(input).shape()
            )));
        }
        Ok((n, c, plane))
    }

    /// Batch mean and biased variance recorded by a training-mode BatchNorm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { stats: Some((m, v)), .. } => Some((m, v)),
            _ => None,
        }
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = ops::relu(self.value(input));
        let rg = self.rg(input);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(OqatError::Shape(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect())?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).data().iter().copied().sum());
        let rg = self.rg(input);
        self.push(value, Op::Sum { input }, rg)
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::global_avg_pool(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    /// Learned-step-size fake quantization of `input` with the scalar step
    /// held by node `step`. `grad_scale` multiplies the step gradient.
    pub fn fake_quant(&mut self, input: NodeId, step: NodeId, range: QRange, grad_scale: T) -> Result<NodeId> {
        let s = self.value(step);
        if !s.is_scalar() {
            return Err(OqatError::Shape(format!("step size must be a scalar, got {:?}", s.shape())));
        }
        let s = s.item();
        if !(s > T::zero()) {
            return Err(OqatError::Quant(format!("step size must be positive, got {:?}", s)));
        }
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), quantizer::fake_quant_values(x.data(), s, range))?;
        let rg = self.rg(input) || self.rg(step);
        Ok(self.push(value, Op::FakeQuant { input, step, range, grad_scale }, rg))
    }

    /// Mean cross-entropy; produces a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let l = self.value(logits);
        let (_, c) = ops::ce_dims(l.shape(), labels)?;
        let loss = ops::cross_entropy(l, labels)?;
        let probs = ops::softmax_rows(l.data(), c);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(OqatError::Graph(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(up);
                continue;
            }
            self.propagate(node, &up, &mut grads);
            grads[idx] = Some(up);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, f: impl FnOnce(&mut [T])) {
        if !self.rg(id) {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let g = grads[id.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    fn propagate(&self, node: &Node<T>, up: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, geom } => {
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let mut gin = self.rg(*input).then(|| vec![T::zero(); x.len()]);
                let mut gw = self.rg(*weight).then(|| vec![T::zero(); w.len()]);
                ops::conv2d_backward_raw(geom, x, w, up, gin.as_deref_mut(), gw.as_deref_mut());
                if let Some(gin) = gin {
                    self.accumulate(grads, *input, |g| add_into(g, &gin));
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *weight, |g| add_into(g, &gw));
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f) = (x.dim(0), x.dim(1));
                let o = w.dim(0);
                self.accumulate(grads, *input, |g| {
                    for r in 0..n {
                        for c in 0..o {
                            let u = up[r * o + c];
                            for (gi, &wv) in g[r * f..(r + 1) * f].iter_mut().zip(&w.data()[c * f..(c + 1) * f]) {
                                *gi = *gi + u * wv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |g| {
                    for r in 0..n {
                        for c in 0..o {
                            let u = up[r * o + c];
                            for (gw, &xv) in g[c * f..(c + 1) * f].iter_mut().zip(&x.data()[r * f..(r + 1) * f]) {
                                *gw = *gw + u * xv;
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    self.accumulate(grads, *b, |g| {
                        for r in 0..n {
                            for c in 0..o {
                                g[c] = g[c] + up[r * o + c];
                            }
                        }
                    });
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, stats } => {
                let shape = self.value(*input).shape();
                let (n, c, plane) = bn_dims(shape).expect("checked at forward");
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            sum_dy[ch] = sum_dy[ch] + up[i];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + up[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |g| add_into(g, &sum_dy_xhat));
                self.accumulate(grads, *beta, |g| add_into(g, &sum_dy));
                let training = stats.is_some();
                self.accumulate(grads, *input, |g| {
                    let m = T::from_usize(n * plane).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + plane {
                                let d = if training {
                                    k * (up[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * up[i]
                                };
                                g[i] = g[i] + d;
                            }
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |g| {
                    for ((gi, &xv), &u) in g.iter_mut().zip(x).zip(up) {
                        if xv > T::zero() {
                            *gi = *gi + u;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |g| add_into(g, up));
                self.accumulate(grads, *b, |g| add_into(g, up));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((gi, &y), &u) in g.iter_mut().zip(vb).zip(up) {
                        *gi = *gi + u * y;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((gi, &x), &u) in g.iter_mut().zip(va).zip(up) {
                        *gi = *gi + u * x;
                    }
                });
            }
            Op::Sum { input } => {
                let u = up[0];
                self.accumulate(grads, *input, |g| g.iter_mut().for_each(|v| *v = *v + u));
            }
            Op::GlobalAvgPool { input } => {
                let s = self.value(*input).shape();
                let plane = s[2] * s[3];
                let inv = T::one() / T::from_usize(plane).unwrap();
                self.accumulate(grads, *input, |g| {
                    for (chunk, &u) in g.chunks_mut(plane).zip(up) {
                        chunk.iter_mut().for_each(|v| *v = *v + u * inv);
                    }
                });
            }
            Op::FakeQuant { input, step, range, grad_scale } => {
                let x = self.value(*input).data();
                let s = self.value(*step).item();
                let (gv, gs) = quantizer::fake_quant_grads(x, s, *range, up);
                self.accumulate(grads, *input, |g| add_into(g, &gv));
                let scaled = gs * *grad_scale;
                self.accumulate(grads, *step, |g| g[0] = g[0] + scaled);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).dim(1);
                let scale = up[0] / T::from_usize(labels.len()).unwrap();
                self.accumulate(grads, *logits, |g| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            g[r * c + j] = g[r * c + j] + (probs[r * c + j] - onehot) * scale;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
