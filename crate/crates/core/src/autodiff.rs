//! Define-by-run reverse-mode autodiff.
//!
//! Nodes are appended to a [`Graph`] in evaluation order, so the node list is
//! already a topological order and [`Graph::backward`] walks it in reverse,
//! visiting each node once. Operations with non-standard gradients (the
//! lookup layer, straight-through quantizers) plug in through [`CustomOp`].

use crate::conv::{conv2d_backward, conv2d_forward, Geometry};
use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Scalar, Tensor, Trans};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose backward rule is supplied by the caller.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &str;

    /// One entry per input; `None` means no gradient flows to that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: Geometry },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Shortcut { input: Var, stride: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    Custom { op: Box<dyn CustomOp<T>>, inputs: Vec<Var> },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) | Op::Reshape(a) | Op::GlobalAvgPool(a) => vec![*a],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::MaxPool { input, .. } | Op::Shortcut { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for updating
/// running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

/// Normalization mode of [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

/// A single forward pass recorded for differentiation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let parents = op.parents();
        let idx = self.nodes.len();
        if let Some(bad) = parents.iter().find(|p| p.0 >= idx) {
            return Err(Error::Graph(format!("node {idx} references later node {}", bad.0)));
        }
        value.check_finite("forward")?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(idx))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        value.check_finite("param")?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        value.check_finite("constant")?;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    /// Flattens all but the first axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: Geometry) -> Result<Var> {
        let v = conv2d_forward(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), geom)?;
        self.push(v, Op::Conv2d { input, kernel, bias, geom })
    }

    /// `x @ W^T + b` with `W` of shape `out x in`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::Shape(format!(
                "linear: input {:?} incompatible with weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            let b = self.value(b);
            if b.shape() != [o] {
                return Err(Error::Shape(format!("linear bias {:?} vs {o} outputs", b.shape())));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(b.data());
            }
        }
        matmul_into(n, i, o, x.data(), Trans::No, w.data(), Trans::Yes, T::one(), &mut out);
        self.push(Tensor::new(vec![n, o], out)?, Op::Linear { input, weight, bias })
    }

    /// Per-channel batch norm over NCHW (or NC) input.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::Shape(format!("batch norm expects NC or NCHW, got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!("batch norm affine params must have {c} channels")));
        }
        let count = n * hw;
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                if count == 0 {
                    return Err(Error::BatchNorm("empty batch".into()));
                }
                let inv = T::one() / T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..n {
                        acc += x.data()[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let m = acc * inv;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &x.data()[(b * c + ch) * hw..][..hw] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq * inv;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!("running stats must have {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let mut inv_std = Vec::with_capacity(c);
        for (ch, &v) in var.iter().enumerate() {
            let d = v + eps;
            if d <= T::zero() || !d.is_finite() {
                return Err(Error::BatchNorm(format!("channel {ch}: sigma^2 + eps = {d} is not positive")));
            }
            inv_std.push(T::one() / d.sqrt());
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let shape = s.to_vec();
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let stats = batch_stats.then(|| BatchStats { mean, var, count });
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats },
        )?;
        Ok((v, stats))
    }

    /// Non-overlapping `k x k` max pooling.
    pub fn max_pool(&mut self, input: Var, k: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::Shape(format!("max_pool({k}) needs NCHW divisible by k, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + y * k * w + xx * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (y * k + dy) * w + xx * k + dx;
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::MaxPool { input, argmax })
    }

    /// NCHW -> NC mean over spatial positions.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool needs NCHW, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.push(Tensor::new(vec![s[0], s[1]], out)?, Op::GlobalAvgPool(input))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride` and
    /// zero channel padding up to `out_channels` (split evenly on both sides).
    pub fn shortcut(&mut self, input: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let v = shortcut_forward(self.value(input), stride, out_channels)?;
        self.push(v, Op::Shortcut { input, stride })
    }

    /// Mean softmax cross-entropy of `N x C` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} vs {} labels",
                x.shape(),
                labels.len()
            )));
        }
        let c = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for (i, row) in x.data().chunks(c).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                probs[i * c + j] = (v - m).exp() / z;
            }
            loss += z.ln() + m - row[labels[i]];
        }
        let n = T::from_usize(labels.len().max(1)).unwrap();
        let probs = Tensor::new(x.shape().to_vec(), probs)?;
        self.push(Tensor::scalar(loss / n), Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Records a caller-computed output with a custom backward rule.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], output: Tensor<T>) -> Result<Var> {
        self.push(output, Op::Custom { op, inputs: inputs.to_vec() })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            g.check_finite("backward")?;
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, pg) in self.local_grads(node, &g)? {
                if parent.0 >= idx {
                    return Err(Error::Graph(format!("cycle through node {idx}")));
                }
                if self.nodes[parent.0].requires_grad {
                    accumulate(&mut grads[parent.0], pg)?;
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |d, x| if x > T::zero() { d } else { T::zero() })?)],
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
            Op::Conv2d { input, kernel, bias, geom } => {
                let (di, dk, db) = conv2d_backward(val(*input), val(*kernel), *geom, g)?;
                let mut out = vec![(*input, di), (*kernel, dk)];
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::Linear { input, weight, bias } => {
                let x = val(*input);
                let w = val(*weight);
                let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let mut dx = vec![T::zero(); n * i];
                matmul_into(n, o, i, g.data(), Trans::No, w.data(), Trans::No, T::zero(), &mut dx);
                let mut dw = vec![T::zero(); o * i];
                matmul_into(o, n, i, g.data(), Trans::Yes, x.data(), Trans::No, T::zero(), &mut dw);
                let mut out = vec![
                    (*input, Tensor::new(vec![n, i], dx)?),
                    (*weight, Tensor::new(vec![o, i], dw)?),
                ];
                if let Some(b) = bias {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, Tensor::from_vec(db)));
                }
                out
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = xhat.shape();
                let (n, c) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let gm = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g.data()[i] * xhat.data()[i];
                            dbeta[ch] += g.data()[i];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                let m = T::from_usize(n * hw).unwrap();
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        let k = gm[ch] * inv_std[ch];
                        for i in off..off + hw {
                            dx[i] = if *batch_stats {
                                k / m * (m * g.data()[i] - dbeta[ch] - xhat.data()[i] * dgamma[ch])
                            } else {
                                k * g.data()[i]
                            };
                        }
                    }
                }
                vec![
                    (*input, Tensor::new(s.to_vec(), dx)?),
                    (*gamma, Tensor::from_vec(dgamma)),
                    (*beta, Tensor::from_vec(dbeta)),
                ]
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(val(*input).shape());
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] += d;
                }
                vec![(*input, dx)]
            }
            Op::GlobalAvgPool(a) => {
                let s = val(*a).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut dx = Vec::with_capacity(val(*a).len());
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d * inv, hw));
                }
                vec![(*a, Tensor::new(s.to_vec(), dx)?)]
            }
            Op::Shortcut { input, stride } => {
                vec![(*input, shortcut_backward(val(*input).shape(), *stride, g)?)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.shape()[1];
                let k = g.item() / T::from_usize(labels.len().max(1)).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d.data_mut()[i * c + l] -= T::one();
                }
                vec![(*logits, d.scale(k))]
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Graph(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                let mut out = Vec::new();
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != val(*v).shape() {
                            return Err(Error::Graph(format!(
                                "{}: gradient shape {:?} vs input {:?}",
                                op.name(),
                                gi.shape(),
                                val(*v).shape()
                            )));
                        }
                        out.push((*v, gi));
                    }
                }
                out
            }
        })
    }
}

/// Channel offset of the zero-padded shortcut.
pub fn shortcut_pad(in_channels: usize, out_channels: usize) -> usize {
    (out_channels - in_channels) / 2
}

pub fn shortcut_forward<T: Scalar>(x: &Tensor<T>, stride: usize, out_channels: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || stride == 0 || out_channels < s[1] {
        return Err(Error::Shape(format!(
            "shortcut: input {s:?}, stride {stride}, {out_channels} output channels"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let pad = shortcut_pad(c, out_channels);
    let mut out = vec![T::zero(); n * out_channels * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[((b * out_channels + ch + pad) * oh + y) * ow + xx] =
                        x.data()[((b * c + ch) * h + y * stride) * w + xx * stride];
                }
            }
        }
    }
    Tensor::new(vec![n, out_channels, oh, ow], out)
}

fn shortcut_backward<T: Scalar>(in_shape: &[usize], stride: usize, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oc, oh, ow) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let pad = shortcut_pad(c, oc);
    let mut dx = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    dx.data_mut()[((b * c + ch) * h + y * stride) * w + xx * stride] +=
                        g.data()[((b * oc + ch + pad) * oh + y) * ow + xx];
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0])).unwrap();
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn nan_forward_is_a_hard_error() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::from_vec(vec![f32::MAX])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn bn_identity_in_eval() {
        let mut g = Graph::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = Tensor::<f32>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let x = g.constant(xt.clone()).unwrap();
        let gm = g.constant(Tensor::ones(&[3])).unwrap();
        let bt = g.constant(Tensor::zeros(&[3])).unwrap();
        let mean = [0.0; 3];
        let var = [1.0; 3];
        let (y, _) = g.batch_norm(x, gm, bt, BnMode::Eval { mean: &mean, var: &var }, 0.0).unwrap();
        assert_eq!(g.value(y).data(), xt.data());
    }

    #[test]
    fn bn_rejects_non_positive_variance() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let gm = g.constant(Tensor::ones(&[1])).unwrap();
        let bt = g.constant(Tensor::zeros(&[1])).unwrap();
        let r = g.batch_norm(x, gm, bt, BnMode::Eval { mean: &[0.0], var: &[0.0] }, 0.0);
        assert!(matches!(r, Err(Error::BatchNorm(_))));
    }

    #[test]
    fn bn_constant_channel_outputs_beta() {
        let mut g = Graph::<f32>::new();
        let mut data = vec![0.0f32; 2 * 2 * 3 * 3];
        for b in 0..2 {
            for i in 0..9 {
                data[(b * 2) * 9 + i] = 4.5; // channel 0 constant
                data[(b * 2 + 1) * 9 + i] = i as f32;
            }
        }
        let x = g.constant(Tensor::new(vec![2, 2, 3, 3], data).unwrap()).unwrap();
        let gm = g.constant(Tensor::from_vec(vec![2.0, 1.0])).unwrap();
        let bt = g.constant(Tensor::from_vec(vec![0.7, 0.0])).unwrap();
        let (y, stats) = g.batch_norm(x, gm, bt, BnMode::Train, 1e-5).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.var[0], 0.0);
        for b in 0..2 {
            for i in 0..9 {
                assert_eq!(g.value(y).data()[(b * 2) * 9 + i], 0.7);
            }
        }
    }

    #[test]
    fn bn_train_matches_direct_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xt = Tensor::<f64>::randn(&[4, 3, 3, 3], 2.0, &mut rng);
        let gamma = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let beta = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.constant(xt.clone()).unwrap();
        let gm = g.constant(gamma.clone()).unwrap();
        let bt = g.constant(beta.clone()).unwrap();
        let (y, _) = g.batch_norm(x, gm, bt, BnMode::Train, 1e-5).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| xt.data()[(b * 3 + ch) * 9..][..9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for b in 0..4 {
                for i in 0..9 {
                    let idx = (b * 3 + ch) * 9 + i;
                    let expect = gamma.data()[ch] * (xt.data()[idx] - mean) / (var + 1e-5).sqrt() + beta.data()[ch];
                    assert!((g.value(y).data()[idx] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_bn_relu_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            Tensor::<f64>::randn(&[2, 2, 5, 5], 1.0, &mut rng),
            Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, &mut rng),
            Tensor::<f64>::randn(&[3], 0.1, &mut rng),
            Tensor::<f64>::rand_uniform(&[3], 0.5, 1.5, &mut rng),
            Tensor::<f64>::randn(&[3], 0.1, &mut rng),
            Tensor::<f64>::randn(&[3, 27], 0.5, &mut rng),
        ];
        let report = check_gradients(&inputs, GradCheck::default(), |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), Geometry::new(3, 2, 1, 1))?;
            let (y, _) = g.batch_norm(y, v[3], v[4], BnMode::Train, 1e-5)?;
            let y = g.relu(y)?;
            let y = g.max_pool(y, 1)?;
            let f = g.flatten(y)?;
            let z = g.linear(f, v[5], None)?;
            g.cross_entropy(z, &[1, 2])
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn pooling_and_shortcut_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut rng), Tensor::<f64>::randn(&[2, 4, 2, 2], 1.0, &mut rng)];
        let report = check_gradients(&inputs, GradCheck::default(), |g, v| {
            let a = g.max_pool(v[0], 2)?;
            let s = g.shortcut(v[0], 2, 4)?;
            let s = g.mul(s, v[1])?;
            let pooled = g.global_avg_pool(s)?;
            let t = g.sum(pooled)?;
            let u = g.sum(a)?;
            let w = g.mul(t, u)?;
            g.scale(w, 0.5)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
