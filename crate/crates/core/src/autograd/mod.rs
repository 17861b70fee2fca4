//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are strictly earlier nodes, so
//! walking the tape backwards is a reverse topological order and each node is
//! visited once per [`Tape::backward`] call.

mod gradcheck;
mod kernels;

pub use gradcheck::{analytic_gradient, grad_check, max_relative_error, max_relative_error_at_scale, numeric_gradient, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use kernels::{ConvDims, ConvGrads};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LOG_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; fold them into the running statistics
    /// when `update_stats` is set.
    Train { update_stats: bool },
    /// Normalize with the running statistics.
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        k: usize,
        cols: Option<Vec<T>>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    TransposedConv {
        input: Var,
        kernel: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Softmax {
        input: Var,
    },
    WeightedCrossEntropy {
        probs: Var,
        classes: Vec<u32>,
        weights: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Dot {
        input: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<T>>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    strict: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            strict: false,
        }
    }

    /// A tape that rejects any operation producing a non-finite element.
    pub fn strict() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
        }
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if self.strict && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nothing upstream needs a gradient, so the saved state is dead weight.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Same-padded stride-1 convolution: `[N,C,H,W] * [F,C,k,k] + [F] -> [N,F,H,W]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("conv2d input")?;
        let [f, kc, kh, kw] = self.value(kernel).dims4("conv2d kernel")?;
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d: kernel expects {kc} input channels, input has {c}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: kernel must be square with odd extent, got {kh}x{kw}"
            )));
        }
        if self.value(bias).shape() != [f] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {f} filters",
                self.value(bias).shape()
            )));
        }
        let d = ConvDims { n, c, h, w, f, k: kh };
        let keep_cols = self.requires_grad(kernel);
        let (out, cols) = kernels::conv2d_forward(
            &d,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            keep_cols,
        );
        let value = Tensor::new(&[n, f, h, w], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                k: kh,
                cols,
            },
            &[input, kernel, bias],
            "conv2d",
        )
    }

    /// Per-channel batch normalization over `N x H x W`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("batch_norm input")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma/beta must have shape [{c}]"
            )));
        }
        if stats.mean.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: running statistics cover {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let eps = T::from_f64(BN_EPSILON);
        let hw = h * w;
        let count = T::from_f64((n * hw) as f64);
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match mode {
            BnMode::Eval => {
                if !stats.initialized {
                    return Err(Error::UninitializedStatistics);
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
            BnMode::Train { update_stats } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for ni in 0..n {
                        s += x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / count;
                    let mut v = T::zero();
                    for ni in 0..n {
                        for &xv in &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[ci] = m;
                    var[ci] = v / count;
                }
                if update_stats {
                    let mom = T::from_f64(BN_MOMENTUM);
                    let keep = T::one() - mom;
                    for ci in 0..c {
                        stats.mean[ci] = mom * stats.mean[ci] + keep * mean[ci];
                        stats.var[ci] = mom * stats.var[ci] + keep * var[ci];
                    }
                    stats.initialized = true;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let range = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for i in range {
                    let xh = (x[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + b[ci];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
            "batch_norm",
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape(), data)?;
        self.push(value, Op::Relu { input }, &[input], "relu")
    }

    /// 2x2 stride-2 max pooling. Ties go to the first element in row-major order.
    pub fn max_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("max_pool_2x2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "max_pool_2x2: spatial extents must be even, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for idx in [
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        self.push(value, Op::MaxPool { input, argmax }, &[input], "max_pool_2x2")
    }

    /// Learned 2x upsampling: `[N,C,H,W] x [C,F,2,2] -> [N,F,2H,2W]`.
    pub fn transposed_conv_2x2(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("transposed_conv_2x2 input")?;
        let [kc, f, kh, kw] = self.value(kernel).dims4("transposed_conv_2x2 kernel")?;
        if kc != c || kh != 2 || kw != 2 {
            return Err(Error::Shape(format!(
                "transposed_conv_2x2: kernel {:?} incompatible with {c} input channels",
                self.value(kernel).shape()
            )));
        }
        let d = ConvDims { n, c, h, w, f, k: 2 };
        let out = kernels::tconv_forward(&d, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(&[n, f, 2 * h, 2 * w], out)?;
        self.push(
            value,
            Op::TransposedConv { input, kernel },
            &[input, kernel],
            "transposed_conv_2x2",
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, c1, h, w] = self.value(a).dims4("concat_channels lhs")?;
        let [n2, c2, h2, w2] = self.value(b).dims4("concat_channels rhs")?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} and {:?} differ outside the channel axis",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (c1 + c2) * hw);
        for ni in 0..n {
            out.extend_from_slice(&xa[ni * c1 * hw..(ni + 1) * c1 * hw]);
            out.extend_from_slice(&xb[ni * c2 * hw..(ni + 1) * c2 * hw]);
        }
        let value = Tensor::new(&[n, c1 + c2, h, w], out)?;
        self.push(value, Op::Concat { a, b }, &[a, b], "concat_channels")
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_pixelwise(&mut self, input: Var) -> Result<Var> {
        let [n, k, h, w] = self.value(input).dims4("softmax_pixelwise input")?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            let base = ni * k * hw;
            for p in 0..hw {
                let mut m = x[base + p];
                for ci in 1..k {
                    m = m.max(x[base + ci * hw + p]);
                }
                let mut s = T::zero();
                for ci in 0..k {
                    let e = (x[base + ci * hw + p] - m).exp();
                    out[base + ci * hw + p] = e;
                    s += e;
                }
                for ci in 0..k {
                    out[base + ci * hw + p] = out[base + ci * hw + p] / s;
                }
            }
        }
        let value = Tensor::new(&[n, k, h, w], out)?;
        self.push(value, Op::Softmax { input }, &[input], "softmax_pixelwise")
    }

    /// Mean over pixels of `-w_c * ln(max(p_c, 1e-7))` at each pixel's true class.
    pub fn weighted_cross_entropy(&mut self, probs: Var, labels: &Tensor<T>, weights: &[T]) -> Result<Var> {
        let [n, k, h, w] = self.value(probs).dims4("weighted_cross_entropy probs")?;
        if weights.len() != k {
            return Err(Error::Config(format!(
                "weighted_cross_entropy: {} class weights for {k} classes",
                weights.len()
            )));
        }
        if labels.shape() != self.value(probs).shape() {
            return Err(Error::Shape(format!(
                "weighted_cross_entropy: labels {:?} vs probs {:?}",
                labels.shape(),
                self.value(probs).shape()
            )));
        }
        let hw = h * w;
        let l = labels.data();
        let mut classes = Vec::with_capacity(n * hw);
        for ni in 0..n {
            for p in 0..hw {
                let mut hot = None;
                for ci in 0..k {
                    let v = l[(ni * k + ci) * hw + p];
                    if v == T::one() {
                        if hot.is_some() {
                            hot = None;
                            break;
                        }
                        hot = Some(ci);
                    } else if v != T::zero() {
                        hot = None;
                        break;
                    }
                }
                match hot {
                    Some(ci) => classes.push(ci as u32),
                    None => {
                        return Err(Error::Shape(format!(
                            "weighted_cross_entropy: labels are not one-hot at batch {ni}, pixel {p}"
                        )))
                    }
                }
            }
        }
        self.weighted_cross_entropy_indices(probs, classes, weights)
    }

    /// [`Tape::weighted_cross_entropy`] with labels given as one class index per pixel.
    pub fn weighted_cross_entropy_indices(&mut self, probs: Var, classes: Vec<u32>, weights: &[T]) -> Result<Var> {
        let [n, k, h, w] = self.value(probs).dims4("weighted_cross_entropy probs")?;
        let hw = h * w;
        if weights.len() != k {
            return Err(Error::Config(format!(
                "weighted_cross_entropy: {} class weights for {k} classes",
                weights.len()
            )));
        }
        if classes.len() != n * hw {
            return Err(Error::Shape(format!(
                "weighted_cross_entropy: {} labels for {} pixels",
                classes.len(),
                n * hw
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= k) {
            return Err(Error::Shape(format!(
                "weighted_cross_entropy: class index {bad} out of range for {k} classes"
            )));
        }
        let p = self.value(probs).data();
        let clamp = T::from_f64(LOG_CLAMP);
        let mut total = T::zero();
        for ni in 0..n {
            for px in 0..hw {
                let c = classes[ni * hw + px] as usize;
                let pv = p[(ni * k + c) * hw + px].max(clamp);
                total += -weights[c] * pv.ln();
            }
        }
        let loss = total / T::from_f64((n * hw) as f64);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy {
                probs,
                classes,
                weights: weights.to_vec(),
            },
            &[probs],
            "weighted_cross_entropy",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() != xb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", xa.shape(), xb.shape())));
        }
        let data = xa.data().iter().zip(xb.data()).map(|(&u, &v)| u + v).collect();
        let value = Tensor::new(xa.shape(), data)?;
        self.push(value, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() != xb.shape() {
            return Err(Error::Shape(format!("mul: {:?} vs {:?}", xa.shape(), xb.shape())));
        }
        let data = xa.data().iter().zip(xb.data()).map(|(&u, &v)| u * v).collect();
        let value = Tensor::new(xa.shape(), data)?;
        self.push(value, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.shape(), data)?;
        self.push(value, Op::Scale { input, factor }, &[input], "scale")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        self.dot(input, vec![T::one(); n])
    }

    /// `sum(x * weights)` against a constant weight vector.
    pub fn dot(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(Error::Shape(format!(
                "dot: {} weights for {} elements",
                weights.len(),
                x.len()
            )));
        }
        let s = x.data().iter().zip(&weights).map(|(&u, &v)| u * v).sum();
        self.push(Tensor::scalar(s), Op::Dot { input, weights }, &[input], "dot")
    }

    /// Backpropagate from a single-element `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must have one element, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                k,
                cols,
            } => {
                let [n, c, h, w] = dims(self.value(*input));
                let f = self.value(*kernel).shape()[0];
                let d = ConvDims { n, c, h, w, f, k: *k };
                let mut dx = self.wants(*input).then(|| vec![T::zero(); n * c * h * w]);
                let mut dk = self.wants(*kernel).then(|| vec![T::zero(); self.value(*kernel).len()]);
                let mut db = self.wants(*bias).then(|| vec![T::zero(); f]);
                kernels::conv2d_backward(
                    &d,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    cols.as_deref(),
                    g,
                    ConvGrads {
                        dx: dx.as_deref_mut(),
                        dkernel: dk.as_deref_mut(),
                        dbias: db.as_deref_mut(),
                    },
                );
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
                accumulate(grads, *bias, db);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = dims(self.value(*input));
                let hw = h * w;
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        for p in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            sum_g[ci] += g[p];
                            sum_gx[ci] += g[p] * xhat[p];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_f64((n * hw) as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            let scale = gm[ci] * inv_std[ci];
                            for p in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                                dx[p] = if *batch_stats {
                                    scale * (g[p] - sum_g[ci] / m - xhat[p] * sum_gx[ci] / m)
                                } else {
                                    scale * g[p]
                                };
                            }
                        }
                    }
                    accumulate(grads, *input, Some(dx));
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Some(sum_gx));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Some(sum_g));
                }
            }
            Op::Relu { input } => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *input, Some(dx));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src as usize] += gv;
                }
                accumulate(grads, *input, Some(dx));
            }
            Op::TransposedConv { input, kernel } => {
                let [n, c, h, w] = dims(self.value(*input));
                let f = self.value(*kernel).shape()[1];
                let d = ConvDims { n, c, h, w, f, k: 2 };
                let mut dx = self.wants(*input).then(|| vec![T::zero(); n * c * h * w]);
                let mut dk = self.wants(*kernel).then(|| vec![T::zero(); self.value(*kernel).len()]);
                kernels::tconv_backward(
                    &d,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
            }
            Op::Concat { a, b } => {
                let [n, c1, h, w] = dims(self.value(*a));
                let c2 = self.value(*b).shape()[1];
                let hw = h * w;
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(n * c1 * hw);
                    for ni in 0..n {
                        let base = ni * (c1 + c2) * hw;
                        da.extend_from_slice(&g[base..base + c1 * hw]);
                    }
                    accumulate(grads, *a, Some(da));
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(n * c2 * hw);
                    for ni in 0..n {
                        let base = ni * (c1 + c2) * hw + c1 * hw;
                        db.extend_from_slice(&g[base..base + c2 * hw]);
                    }
                    accumulate(grads, *b, Some(db));
                }
            }
            Op::Softmax { input } => {
                let [n, k, h, w] = dims(&node.value);
                let hw = h * w;
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ni in 0..n {
                    let base = ni * k * hw;
                    for p in 0..hw {
                        let mut dotp = T::zero();
                        for ci in 0..k {
                            dotp += g[base + ci * hw + p] * y[base + ci * hw + p];
                        }
                        for ci in 0..k {
                            let idx = base + ci * hw + p;
                            dx[idx] = y[idx] * (g[idx] - dotp);
                        }
                    }
                }
                accumulate(grads, *input, Some(dx));
            }
            Op::WeightedCrossEntropy {
                probs,
                classes,
                weights,
            } => {
                let [n, k, h, w] = dims(self.value(*probs));
                let hw = h * w;
                let p = self.value(*probs).data();
                let clamp = T::from_f64(LOG_CLAMP);
                let scale = g[0] / T::from_f64((n * hw) as f64);
                let mut dp = vec![T::zero(); p.len()];
                for ni in 0..n {
                    for px in 0..hw {
                        let c = classes[ni * hw + px] as usize;
                        let idx = (ni * k + c) * hw + px;
                        if p[idx] > clamp {
                            dp[idx] = -scale * weights[c] / p[idx];
                        }
                    }
                }
                accumulate(grads, *probs, Some(dp));
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, self.wants(*a).then(|| g.to_vec()));
                accumulate(grads, *b, self.wants(*b).then(|| g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let da = self
                    .wants(*a)
                    .then(|| g.iter().zip(xb).map(|(&gv, &v)| gv * v).collect());
                let db = self
                    .wants(*b)
                    .then(|| g.iter().zip(xa).map(|(&gv, &v)| gv * v).collect());
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, Some(g.iter().map(|&v| v * *factor).collect()));
            }
            Op::Dot { input, weights } => {
                accumulate(grads, *input, Some(weights.iter().map(|&w| w * g[0]).collect()));
            }
        }
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests;
