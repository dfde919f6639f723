//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive appends a node holding its forward value and the inputs it
//! read. Nodes are only ever appended, so node order is a topological order and
//! [`Tape::backward`] is a single reverse sweep. The tape is not mutated by
//! `backward`; calling it twice yields bitwise-identical gradients.

use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Gap(Var),
    Linear {
        input: Var,
        weights: Var,
        bias: Var,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    ApplyMask {
        features: Var,
        mask: Var,
    },
    Select(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if `var` does not reach the loss.
    pub fn wrt(&self, var: Var) -> &Tensor {
        &self.grads[var.0]
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        let shape = self.grads[var.0].shape().to_vec();
        std::mem::replace(&mut self.grads[var.0], Tensor::zeros(&shape))
    }
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output spatial extent of a 3×3 convolution, if positive.
pub(crate) fn conv_out_len(len: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < 3 || stride == 0 {
        return None;
    }
    Some((padded - 3) / stride + 1)
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// 3×3 cross-correlation of a `c_in × h × w` input with `c_out × c_in × 3 × 3`
    /// kernels, plus a per-output-channel bias. Out-of-range taps read zero.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernels), self.value(bias));
        if x.rank() != 3 {
            return Err(Error::config(format!(
                "conv2d input must be c×h×w, got {:?}",
                x.shape()
            )));
        }
        if k.rank() != 4 || k.shape()[2] != 3 || k.shape()[3] != 3 {
            return Err(Error::config(format!(
                "conv2d kernels must be c_out×c_in×3×3, got {:?}",
                k.shape()
            )));
        }
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let c_out = k.shape()[0];
        if k.shape()[1] != c_in {
            return Err(Error::config(format!(
                "conv2d kernels expect {} input channels, input has {c_in}",
                k.shape()[1]
            )));
        }
        if b.shape() != [c_out] {
            return Err(Error::config(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                b.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (oh, ow) = match (
            conv_out_len(h, stride, padding),
            conv_out_len(w, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::config(format!(
                    "conv2d output would be empty for {h}×{w}, stride {stride}, padding {padding}"
                )))
            }
        };

        let (xd, kd) = (x.data(), k.data());
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(b.data()[o]);
            for i in 0..c_in {
                let kbase = (o * c_in + i) * 9;
                let xplane = &xd[i * h * w..(i + 1) * h * w];
                for oy in 0..oh {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xplane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    acc += kd[kbase + ky * 3 + kx] * row[ix as usize];
                                }
                            }
                            plane[oy * ow + ox] += acc;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![c_out, oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Global average pooling of a `c × d × k` map to a length-`c` vector.
    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 3 {
            return Err(Error::shape(format!(
                "gap expects a rank-3 tensor, got {:?}",
                x.shape()
            )));
        }
        let c = x.shape()[0];
        let area = x.shape()[1] * x.shape()[2];
        let data = x
            .data()
            .chunks(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        let out = Tensor::new(vec![c], data)?;
        Ok(self.push(out, Op::Gap(input)))
    }

    /// `weights · input + bias` for `weights` of shape `n × c`.
    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weights), self.value(bias));
        if x.rank() != 1 || wt.rank() != 2 || wt.shape()[1] != x.numel() {
            return Err(Error::shape(format!(
                "linear: weights {:?} incompatible with input {:?}",
                wt.shape(),
                x.shape()
            )));
        }
        let n = wt.shape()[0];
        if b.shape() != [n] {
            return Err(Error::shape(format!(
                "linear: bias {:?}, expected [{n}]",
                b.shape()
            )));
        }
        let data = wt
            .data()
            .chunks(x.numel())
            .zip(b.data())
            .map(|(row, bias)| row.iter().zip(x.data()).map(|(p, q)| p * q).sum::<f64>() + bias)
            .collect();
        let out = Tensor::new(vec![n], data)?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weights,
                bias,
            },
        ))
    }

    /// `-log softmax(logits)[label]`, computed with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 1 {
            return Err(Error::shape(format!(
                "logits must be a vector, got {:?}",
                z.shape()
            )));
        }
        if label >= z.numel() {
            return Err(Error::input(format!(
                "label {label} out of range for {} classes",
                z.numel()
            )));
        }
        let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.data().iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() - (z.data()[label] - max);
        let probs = exps.iter().map(|e| e / total).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Softmax probabilities saved by a [`Tape::softmax_cross_entropy`] node.
    pub fn softmax_of(&self, loss: Var) -> Option<&[f64]> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Multiplies a `c × d × k` feature map by a `d × k` mask shared across channels.
    pub fn apply_mask(&mut self, features: Var, mask: Var) -> Result<Var> {
        let (f, m) = (self.value(features), self.value(mask));
        if f.rank() != 3 || m.rank() != 2 || f.shape()[1..] != *m.shape() {
            return Err(Error::shape(format!(
                "mask {:?} does not match feature map {:?}",
                m.shape(),
                f.shape()
            )));
        }
        let md = m.data();
        let data = f
            .data()
            .chunks(md.len())
            .flat_map(|plane| plane.iter().zip(md).map(|(x, w)| x * w))
            .collect();
        let out = Tensor::new(f.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ApplyMask { features, mask }))
    }

    /// Element `index` of a tensor, as a scalar.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        if index >= x.numel() {
            return Err(Error::input(format!(
                "index {index} out of range for {:?}",
                x.shape()
            )));
        }
        let out = Tensor::scalar(x.data()[index]);
        Ok(self.push(out, Op::Select(input, index)))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, y, |g, y| g * y);
                    let gb = zip_map(&g, x, |g, x| g * x);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, *a, g.map(|v| v * factor));
                }
                Op::Sum(a) => {
                    let s = g.item();
                    accumulate(&mut grads, *a, Tensor::filled(self.value(*a).shape(), s));
                }
                Op::Square(a) => {
                    accumulate(
                        &mut grads,
                        *a,
                        zip_map(&g, self.value(*a), |g, x| 2.0 * x * g),
                    );
                }
                Op::Abs(a) => {
                    let ga = zip_map(&g, self.value(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip_map(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, &node.value, |g, s| g * s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gi, gk, gb) =
                        self.conv2d_backward(&g, *input, *kernels, *stride, *padding);
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernels, gk);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Gap(a) => {
                    let x = self.value(*a);
                    let area = x.shape()[1] * x.shape()[2];
                    let scale = 1.0 / area as f64;
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gc| std::iter::repeat_n(gc * scale, area))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Linear {
                    input,
                    weights,
                    bias,
                } => {
                    let (x, wt) = (self.value(*input), self.value(*weights));
                    let c = x.numel();
                    let mut gx = vec![0.0; c];
                    let mut gw = Vec::with_capacity(wt.numel());
                    for (row, &go) in wt.data().chunks(c).zip(g.data()) {
                        for (j, (&wv, &xv)) in row.iter().zip(x.data()).enumerate() {
                            gx[j] += go * wv;
                            gw.push(go * xv);
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::new(x.shape().to_vec(), gx)?);
                    accumulate(&mut grads, *weights, Tensor::new(wt.shape().to_vec(), gw)?);
                    accumulate(&mut grads, *bias, g.clone());
                }
                Op::SoftmaxCe {
                    logits,
                    label,
                    probs,
                } => {
                    let s = g.item();
                    let data = probs
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| s * (p - if i == *label { 1.0 } else { 0.0 }))
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::vector(data));
                }
                Op::ApplyMask { features, mask } => {
                    let (f, m) = (self.value(*features), self.value(*mask));
                    let area = m.numel();
                    let mut gm = vec![0.0; area];
                    let mut gf = Vec::with_capacity(f.numel());
                    for (gp, fp) in g.data().chunks(area).zip(f.data().chunks(area)) {
                        for j in 0..area {
                            gf.push(gp[j] * m.data()[j]);
                            gm[j] += gp[j] * fp[j];
                        }
                    }
                    accumulate(&mut grads, *features, Tensor::new(f.shape().to_vec(), gf)?);
                    accumulate(&mut grads, *mask, Tensor::new(m.shape().to_vec(), gm)?);
                }
                Op::Select(a, index) => {
                    let mut ga = Tensor::zeros(self.value(*a).shape());
                    ga.data_mut()[*index] = g.item();
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
            .collect();
        Ok(Gradients { grads })
    }

    fn conv2d_backward(
        &self,
        g: &Tensor,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    ) -> (Tensor, Tensor, Tensor) {
        let (x, k) = (self.value(input), self.value(kernels));
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let (xd, kd, gd) = (x.data(), k.data(), g.data());
        let mut gi = vec![0.0; xd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gb = vec![0.0; c_out];
        for o in 0..c_out {
            let gplane = &gd[o * oh * ow..(o + 1) * oh * ow];
            gb[o] = gplane.iter().sum();
            for i in 0..c_in {
                let kbase = (o * c_in + i) * 9;
                let xoff = i * h * w;
                for oy in 0..oh {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let rowoff = xoff + iy as usize * w;
                        for ox in 0..ow {
                            let go = gplane[oy * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    let xi = rowoff + ix as usize;
                                    gk[kbase + ky * 3 + kx] += go * xd[xi];
                                    gi[xi] += go * kd[kbase + ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            Tensor {
                shape: x.shape().to_vec(),
                data: gi,
            },
            Tensor {
                shape: k.shape().to_vec(),
                data: gk,
            },
            Tensor {
                shape: vec![c_out],
                data: gb,
            },
        )
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape().to_vec(),
        data: g
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| f(a, b))
            .collect(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
