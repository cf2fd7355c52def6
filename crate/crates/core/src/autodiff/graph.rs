//! Tape of operation records with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the arena index is already a
//! topological order: backward walks it in reverse and visits each record
//! once.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::kernels::{self, ConvGeom, UpsampleMode};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Upsample {
        input: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    MaxPool2(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// Normalization with frozen statistics.
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    /// Softmax over axis 1 of an NCHW tensor.
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `scale * x + shift`
    Affine {
        input: Var,
        scale: f64,
        shift: f64,
    },
    /// `ln(max(x, floor))`
    Ln {
        input: Var,
        floor: f64,
    },
    Sum(Var),
    Mean(Var),
    /// Reduces an NCHW tensor to a `[C]` vector.
    SumPerChannel(Var),
    ConcatChannels(Var, Var),
    SelectBatch {
        input: Var,
        indices: Vec<usize>,
    },
    /// Temperature sharpening of probabilities. Single-channel (or non-4-d)
    /// inputs use the two-outcome form; multi-channel NCHW inputs normalize
    /// tempered powers over axis 1.
    Sharpen {
        input: Var,
        temperature: f64,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            ConvTranspose2d { input, kernel, .. } => vec![*input, *kernel],
            BiasAdd { input, bias } => vec![*input, *bias],
            BatchNorm {
                input, gamma, beta, ..
            }
            | BatchNormEval {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Upsample { input, .. }
            | Affine { input, .. }
            | Ln { input, .. }
            | SelectBatch { input, .. }
            | Sharpen { input, .. } => vec![*input],
            MaxPool2(a) | Relu(a) | Sigmoid(a) | Softmax(a) | Sum(a) | Mean(a) | SumPerChannel(a) => {
                vec![*a]
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ConcatChannels(a, b) => vec![*a, *b],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked")
}

fn sharpen_binary(p: f64, inv_t: f64) -> f64 {
    if inv_t == 1.0 {
        return p;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let a = p.powf(inv_t);
    let b = (1.0 - p).powf(inv_t);
    a / (a + b)
}

fn sharpen_binary_slope(p: f64, s: f64, inv_t: f64) -> f64 {
    if inv_t == 1.0 {
        return 1.0;
    }
    let d = p * (1.0 - p);
    if d <= 0.0 {
        0.0
    } else {
        inv_t * s * (1.0 - s) / d
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.push(Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.push(Op::ConvTranspose2d { input, kernel, stride })
    }

    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        self.push(Op::BiasAdd { input, bias })
    }

    pub fn upsample(&mut self, input: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        self.push(Op::Upsample { input, factor, mode })
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        self.push(Op::MaxPool2(input))
    }

    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::BatchNorm {
            input,
            gamma,
            beta,
            eps,
        })
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> Result<Var> {
        self.push(Op::BatchNormEval {
            input,
            gamma,
            beta,
            mean,
            var,
            eps,
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Result<Var> {
        self.push(Op::Affine { input, scale, shift })
    }

    pub fn scale(&mut self, input: Var, scale: f64) -> Result<Var> {
        self.affine(input, scale, 0.0)
    }

    pub fn ln(&mut self, input: Var, floor: f64) -> Result<Var> {
        self.push(Op::Ln { input, floor })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }

    pub fn sum_per_channel(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SumPerChannel(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatChannels(a, b))
    }

    pub fn select_batch(&mut self, input: Var, indices: Vec<usize>) -> Result<Var> {
        self.push(Op::SelectBatch { input, indices })
    }

    pub fn sharpen(&mut self, input: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        self.push(Op::Sharpen { input, temperature })
    }

    fn conv_geom(&self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<ConvGeom> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (cout, kcin, kh, kw) = self.value(kernel).dims4()?;
        if kcin != cin {
            return Err(Error::Config(format!(
                "conv2d: input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Input(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeom {
            batch: b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
        })
    }

    /// Geometry of the forward convolution whose adjoint is the transposed
    /// convolution of `input` with `kernel`.
    fn conv_t_geom(&self, input: Var, kernel: Var, stride: usize) -> Result<ConvGeom> {
        let (b, cin, h, w) = self.value(input).dims4()?;
        let (kcin, cout, kh, kw) = self.value(kernel).dims4()?;
        if kcin != cin {
            return Err(Error::Config(format!(
                "conv_transpose2d: input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv_transpose2d: stride must be positive".into()));
        }
        Ok(ConvGeom {
            batch: b,
            cin: cout,
            h: (h - 1) * stride + kh,
            w: (w - 1) * stride + kw,
            cout: cin,
            kh,
            kw,
            stride,
            pad: 0,
        })
    }

    fn channel_param(&self, v: Var, channels: usize, what: &str) -> Result<()> {
        let t = self.value(v);
        if t.len() != channels {
            return Err(Error::Config(format!(
                "{what}: expected {channels} per-channel values, got shape {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    fn eval(&self, op: &Op) -> Result<Tensor<T>> {
        use Op::*;
        let v = |x: &Var| self.value(*x);
        match op {
            Leaf => Err(Error::Usage("leaf nodes have no forward rule".into())),
            Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let g = self.conv_geom(*input, *kernel, *stride, *padding)?;
                if let Some(b) = bias {
                    self.channel_param(*b, g.cout, "conv2d bias")?;
                }
                let out = kernels::conv2d_forward(v(input).data(), v(kernel).data(), bias.map(|b| v(&b).data()), &g);
                Tensor::new(&[g.batch, g.cout, g.out_h(), g.out_w()], out)
            }
            ConvTranspose2d { input, kernel, stride } => {
                let g = self.conv_t_geom(*input, *kernel, *stride)?;
                let out = kernels::conv2d_input_grad(v(input).data(), v(kernel).data(), &g);
                Tensor::new(&[g.batch, g.cin, g.h, g.w], out)
            }
            BiasAdd { input, bias } => {
                let x = v(input);
                let (b, c, h, w) = x.dims4()?;
                self.channel_param(*bias, c, "bias_add")?;
                let bias = v(bias).data();
                let mut out = x.clone();
                for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
                    let bv = bias[i % c];
                    chunk.iter_mut().for_each(|e| *e += bv);
                }
                debug_assert_eq!(out.len(), b * c * h * w);
                Ok(out)
            }
            Upsample { input, factor, mode } => {
                if *factor == 0 {
                    return Err(Error::Config("upsample factor must be >= 1".into()));
                }
                let (b, c, h, w) = v(input).dims4()?;
                let out = kernels::upsample_forward(v(input).data(), b * c, h, w, *factor, *mode);
                Tensor::new(&[b, c, h * factor, w * factor], out)
            }
            MaxPool2(input) => {
                let (b, c, h, w) = v(input).dims4()?;
                let (out, _) = kernels::max_pool2(v(input).data(), b * c, h, w);
                Tensor::new(&[b, c, h / 2, w / 2], out)
            }
            BatchNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let x = v(input);
                let (b, c, h, w) = x.dims4()?;
                self.channel_param(*gamma, c, "batch_norm gamma")?;
                self.channel_param(*beta, c, "batch_norm beta")?;
                let (mean, var) = kernels::channel_moments(x.data(), b, c, h * w);
                Ok(self.normalize(x, v(gamma), v(beta), &mean, &var, *eps))
            }
            BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let x = v(input);
                let (_, c, _, _) = x.dims4()?;
                self.channel_param(*gamma, c, "batch_norm gamma")?;
                self.channel_param(*beta, c, "batch_norm beta")?;
                if mean.len() != c || var.len() != c {
                    return Err(Error::Config("batch_norm running statistics have wrong length".into()));
                }
                Ok(self.normalize(x, v(gamma), v(beta), mean, var, *eps))
            }
            Relu(x) => Ok(v(x).map(|e| if e > T::zero() { e } else { T::zero() })),
            Sigmoid(x) => Ok(v(x).map(|e| T::one() / (T::one() + (-e).exp()))),
            Softmax(x) => {
                let t = v(x);
                let (b, c, h, w) = t.dims4()?;
                let plane = h * w;
                let src = t.data();
                let mut out = vec![T::zero(); t.len()];
                for bi in 0..b {
                    let base = bi * c * plane;
                    for p in 0..plane {
                        let mut m = T::neg_infinity();
                        for ci in 0..c {
                            m = m.max(src[base + ci * plane + p]);
                        }
                        let mut s = T::zero();
                        for ci in 0..c {
                            let e = (src[base + ci * plane + p] - m).exp();
                            out[base + ci * plane + p] = e;
                            s += e;
                        }
                        for ci in 0..c {
                            out[base + ci * plane + p] = out[base + ci * plane + p] / s;
                        }
                    }
                }
                Tensor::new(t.shape(), out)
            }
            Add(a, b) => {
                same_shape(v(a), v(b), "add")?;
                Ok(zip_map(v(a), v(b), |x, y| x + y))
            }
            Sub(a, b) => {
                same_shape(v(a), v(b), "sub")?;
                Ok(zip_map(v(a), v(b), |x, y| x - y))
            }
            Mul(a, b) => {
                same_shape(v(a), v(b), "mul")?;
                Ok(zip_map(v(a), v(b), |x, y| x * y))
            }
            Div(a, b) => {
                same_shape(v(a), v(b), "div")?;
                Ok(zip_map(v(a), v(b), |x, y| x / y))
            }
            Affine { input, scale, shift } => {
                let (s, o) = (T::of(*scale), T::of(*shift));
                Ok(v(input).map(|e| s * e + o))
            }
            Ln { input, floor } => {
                let f = T::of(*floor);
                Ok(v(input).map(|e| e.max(f).ln()))
            }
            Sum(x) => Ok(Tensor::scalar(v(x).data().iter().copied().sum())),
            Mean(x) => {
                let t = v(x);
                if t.is_empty() {
                    return Err(Error::Input("mean of an empty tensor".into()));
                }
                let s: T = t.data().iter().copied().sum();
                Ok(Tensor::scalar(s / T::of(t.len() as f64)))
            }
            SumPerChannel(x) => {
                let (b, c, h, w) = v(x).dims4()?;
                Tensor::new(&[c], kernels::channel_sums(v(x).data(), b, c, h * w))
            }
            ConcatChannels(a, b) => {
                let (ba, ca, ha, wa) = v(a).dims4()?;
                let (bb, cb, hb, wb) = v(b).dims4()?;
                if ba != bb || ha != hb || wa != wb {
                    return Err(Error::Input(format!(
                        "concat: incompatible shapes {:?} and {:?}",
                        v(a).shape(),
                        v(b).shape()
                    )));
                }
                let (pa, pb) = (ca * ha * wa, cb * hb * wb);
                let mut out = Vec::with_capacity(ba * (pa + pb));
                for i in 0..ba {
                    out.extend_from_slice(&v(a).data()[i * pa..(i + 1) * pa]);
                    out.extend_from_slice(&v(b).data()[i * pb..(i + 1) * pb]);
                }
                Tensor::new(&[ba, ca + cb, ha, wa], out)
            }
            SelectBatch { input, indices } => {
                let t = v(input);
                let lead = *t.shape().first().ok_or_else(|| Error::Input("select_batch on a scalar".into()))?;
                if let Some(&bad) = indices.iter().find(|&&i| i >= lead) {
                    return Err(Error::Input(format!("select_batch index {bad} out of range {lead}")));
                }
                let per = if lead == 0 { 0 } else { t.len() / lead };
                let mut out = Vec::with_capacity(per * indices.len());
                for &i in indices {
                    out.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
                }
                let mut shape = t.shape().to_vec();
                shape[0] = indices.len();
                Tensor::new(&shape, out)
            }
            Sharpen { input, temperature } => {
                let t = v(input);
                let inv_t = 1.0 / temperature;
                match t.shape() {
                    [b, c, h, w] if *c > 1 => {
                        let plane = h * w;
                        let src = t.data();
                        let mut out = vec![T::zero(); t.len()];
                        for bi in 0..*b {
                            for p in 0..plane {
                                let idx = |ci: usize| (bi * c + ci) * plane + p;
                                let logs: Vec<f64> = (0..*c)
                                    .map(|ci| {
                                        let q = src[idx(ci)].as_f64();
                                        if q > 0.0 {
                                            inv_t * q.ln()
                                        } else {
                                            f64::NEG_INFINITY
                                        }
                                    })
                                    .collect();
                                let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                                let ex: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
                                let s: f64 = ex.iter().sum();
                                for ci in 0..*c {
                                    out[idx(ci)] = T::of(ex[ci] / s);
                                }
                            }
                        }
                        Tensor::new(t.shape(), out)
                    }
                    _ => Ok(t.map(|p| T::of(sharpen_binary(p.as_f64(), inv_t)))),
                }
            }
        }
    }

    fn normalize(&self, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, mean: &[f64], var: &[f64], eps: f64) -> Tensor<T> {
        let (_, c, h, w) = x.dims4().expect("checked");
        let plane = h * w;
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ci = i % c;
            let inv = 1.0 / (var[ci] + eps).sqrt();
            let scale = T::of(gamma.data()[ci].as_f64() * inv);
            let shift = T::of(beta.data()[ci].as_f64() - mean[ci] * gamma.data()[ci].as_f64() * inv);
            chunk.iter_mut().for_each(|e| *e = *e * scale + shift);
        }
        out
    }

    /// Recompute every non-leaf record from its inputs and report whether all
    /// stored forward values are reproduced bit for bit.
    pub fn replay(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let again = self.eval(&node.op)?;
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse-mode sweep from a scalar `loss`. Afterwards [`Graph::grad`]
    /// returns d loss / d v for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            for (input, g) in self.input_grads(i, &gout)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(gout);
        }
        // Nodes that require grad but do not feed the loss get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, idx: usize, gout: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        use Op::*;
        let node = &self.nodes[idx];
        let out = &node.value;
        let v = |x: &Var| self.value(*x);
        let rg = |x: &Var| self.requires_grad(*x);
        let g = gout.data();
        let mut res = Vec::new();
        match &node.op {
            Leaf => {}
            Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let geom = self.conv_geom(*input, *kernel, *stride, *padding)?;
                if rg(input) {
                    let dx = kernels::conv2d_input_grad(g, v(kernel).data(), &geom);
                    res.push((*input, Tensor::new(v(input).shape(), dx)?));
                }
                if rg(kernel) {
                    let dw = kernels::conv2d_weight_grad(v(input).data(), g, &geom);
                    res.push((*kernel, Tensor::new(v(kernel).shape(), dw)?));
                }
                if let Some(b) = bias.filter(|b| rg(b)) {
                    let db = kernels::channel_sums(g, geom.batch, geom.cout, geom.out_h() * geom.out_w());
                    res.push((b, Tensor::new(v(&b).shape(), db)?));
                }
            }
            ConvTranspose2d { input, kernel, stride } => {
                let geom = self.conv_t_geom(*input, *kernel, *stride)?;
                if rg(input) {
                    let dx = kernels::conv2d_forward(g, v(kernel).data(), None, &geom);
                    res.push((*input, Tensor::new(v(input).shape(), dx)?));
                }
                if rg(kernel) {
                    let dw = kernels::conv2d_weight_grad(g, v(input).data(), &geom);
                    res.push((*kernel, Tensor::new(v(kernel).shape(), dw)?));
                }
            }
            BiasAdd { input, bias } => {
                if rg(input) {
                    res.push((*input, gout.clone()));
                }
                if rg(bias) {
                    let (b, c, h, w) = out.dims4()?;
                    res.push((*bias, Tensor::new(v(bias).shape(), kernels::channel_sums(g, b, c, h * w))?));
                }
            }
            Upsample { input, factor, mode } => {
                if rg(input) {
                    let (b, c, h, w) = v(input).dims4()?;
                    let dx = kernels::upsample_backward(g, b * c, h, w, *factor, *mode);
                    res.push((*input, Tensor::new(v(input).shape(), dx)?));
                }
            }
            MaxPool2(input) => {
                if rg(input) {
                    let (b, c, h, w) = v(input).dims4()?;
                    let (_, arg) = kernels::max_pool2(v(input).data(), b * c, h, w);
                    let mut dx = Tensor::zeros(v(input).shape());
                    for (o, &src) in arg.iter().enumerate() {
                        dx.data_mut()[src] += g[o];
                    }
                    res.push((*input, dx));
                }
            }
            BatchNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let x = v(input);
                let (b, c, h, w) = x.dims4()?;
                let plane = h * w;
                let n = (b * plane) as f64;
                let (mean, var) = kernels::channel_moments(x.data(), b, c, plane);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let inv = 1.0 / (var[ci] + eps).sqrt();
                        let start = (bi * c + ci) * plane;
                        for k in start..start + plane {
                            let gv = g[k].as_f64();
                            sum_g[ci] += gv;
                            sum_gx[ci] += gv * (x.data()[k].as_f64() - mean[ci]) * inv;
                        }
                    }
                }
                if rg(input) {
                    let mut dx = Tensor::zeros(x.shape());
                    for bi in 0..b {
                        for ci in 0..c {
                            let inv = 1.0 / (var[ci] + eps).sqrt();
                            let k0 = v(gamma).data()[ci].as_f64() * inv / n;
                            let start = (bi * c + ci) * plane;
                            for k in start..start + plane {
                                let xh = (x.data()[k].as_f64() - mean[ci]) * inv;
                                dx.data_mut()[k] = T::of(k0 * (n * g[k].as_f64() - sum_g[ci] - xh * sum_gx[ci]));
                            }
                        }
                    }
                    res.push((*input, dx));
                }
                if rg(gamma) {
                    res.push((*gamma, Tensor::from_f64(v(gamma).shape(), &sum_gx)?));
                }
                if rg(beta) {
                    res.push((*beta, Tensor::from_f64(v(beta).shape(), &sum_g)?));
                }
            }
            BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let x = v(input);
                let (b, c, h, w) = x.dims4()?;
                let plane = h * w;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut dx = Tensor::zeros(x.shape());
                for bi in 0..b {
                    for ci in 0..c {
                        let inv = 1.0 / (var[ci] + eps).sqrt();
                        let gi = v(gamma).data()[ci].as_f64() * inv;
                        let start = (bi * c + ci) * plane;
                        for k in start..start + plane {
                            let gv = g[k].as_f64();
                            sum_g[ci] += gv;
                            sum_gx[ci] += gv * (x.data()[k].as_f64() - mean[ci]) * inv;
                            dx.data_mut()[k] = T::of(gv * gi);
                        }
                    }
                }
                if rg(input) {
                    res.push((*input, dx));
                }
                if rg(gamma) {
                    res.push((*gamma, Tensor::from_f64(v(gamma).shape(), &sum_gx)?));
                }
                if rg(beta) {
                    res.push((*beta, Tensor::from_f64(v(beta).shape(), &sum_g)?));
                }
            }
            Relu(x) => {
                if rg(x) {
                    res.push((*x, zip_map(v(x), gout, |a, gg| if a > T::zero() { gg } else { T::zero() })));
                }
            }
            Sigmoid(x) => {
                if rg(x) {
                    res.push((*x, zip_map(out, gout, |y, gg| gg * y * (T::one() - y))));
                }
            }
            Softmax(x) => {
                if rg(x) {
                    let (b, c, h, w) = out.dims4()?;
                    let plane = h * w;
                    let y = out.data();
                    let mut dx = Tensor::zeros(out.shape());
                    for bi in 0..b {
                        for p in 0..plane {
                            let idx = |ci: usize| (bi * c + ci) * plane + p;
                            let dotp: T = (0..c).map(|ci| g[idx(ci)] * y[idx(ci)]).sum();
                            for ci in 0..c {
                                dx.data_mut()[idx(ci)] = y[idx(ci)] * (g[idx(ci)] - dotp);
                            }
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Add(a, b) => {
                if rg(a) {
                    res.push((*a, gout.clone()));
                }
                if rg(b) {
                    res.push((*b, gout.clone()));
                }
            }
            Sub(a, b) => {
                if rg(a) {
                    res.push((*a, gout.clone()));
                }
                if rg(b) {
                    res.push((*b, gout.map(|e| -e)));
                }
            }
            Mul(a, b) => {
                if rg(a) {
                    res.push((*a, zip_map(gout, v(b), |gg, y| gg * y)));
                }
                if rg(b) {
                    res.push((*b, zip_map(gout, v(a), |gg, x| gg * x)));
                }
            }
            Div(a, b) => {
                if rg(a) {
                    res.push((*a, zip_map(gout, v(b), |gg, y| gg / y)));
                }
                if rg(b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip_map(out, v(b), |o, y| o / y);
                    res.push((*b, zip_map(gout, &q, |gg, qq| -gg * qq)));
                }
            }
            Affine { input, scale, .. } => {
                if rg(input) {
                    let s = T::of(*scale);
                    res.push((*input, gout.map(|e| e * s)));
                }
            }
            Ln { input, floor } => {
                if rg(input) {
                    let f = T::of(*floor);
                    res.push((*input, zip_map(gout, v(input), |gg, x| if x > f { gg / x } else { T::zero() })));
                }
            }
            Sum(x) => {
                if rg(x) {
                    res.push((*x, Tensor::full(v(x).shape(), g[0])));
                }
            }
            Mean(x) => {
                if rg(x) {
                    let n = T::of(v(x).len() as f64);
                    res.push((*x, Tensor::full(v(x).shape(), g[0] / n)));
                }
            }
            SumPerChannel(x) => {
                if rg(x) {
                    let (b, c, h, w) = v(x).dims4()?;
                    let mut dx = Tensor::zeros(v(x).shape());
                    for (i, chunk) in dx.data_mut().chunks_mut(h * w).enumerate() {
                        chunk.fill(g[i % c]);
                    }
                    debug_assert_eq!(dx.len(), b * c * h * w);
                    res.push((*x, dx));
                }
            }
            ConcatChannels(a, b) => {
                let (bn, ca, h, w) = v(a).dims4()?;
                let cb = v(b).dims4()?.1;
                let (pa, pb) = (ca * h * w, cb * h * w);
                if rg(a) {
                    let mut da = Vec::with_capacity(bn * pa);
                    for i in 0..bn {
                        da.extend_from_slice(&g[i * (pa + pb)..i * (pa + pb) + pa]);
                    }
                    res.push((*a, Tensor::new(v(a).shape(), da)?));
                }
                if rg(b) {
                    let mut db = Vec::with_capacity(bn * pb);
                    for i in 0..bn {
                        db.extend_from_slice(&g[i * (pa + pb) + pa..(i + 1) * (pa + pb)]);
                    }
                    res.push((*b, Tensor::new(v(b).shape(), db)?));
                }
            }
            SelectBatch { input, indices } => {
                if rg(input) {
                    let t = v(input);
                    let per = t.len() / t.shape()[0];
                    let mut dx = Tensor::zeros(t.shape());
                    for (k, &i) in indices.iter().enumerate() {
                        let dst = &mut dx.data_mut()[i * per..(i + 1) * per];
                        dst.iter_mut().zip(&g[k * per..(k + 1) * per]).for_each(|(d, &s)| *d += s);
                    }
                    res.push((*input, dx));
                }
            }
            Sharpen { input, temperature } => {
                if rg(input) {
                    let inv_t = 1.0 / temperature;
                    let p = v(input);
                    let dx = match p.shape() {
                        [b, c, h, w] if *c > 1 => {
                            let plane = h * w;
                            let mut dx = Tensor::zeros(p.shape());
                            for bi in 0..*b {
                                for px in 0..plane {
                                    let idx = |ci: usize| (bi * c + ci) * plane + px;
                                    let dotp: f64 = (0..*c).map(|ci| g[idx(ci)].as_f64() * out.data()[idx(ci)].as_f64()).sum();
                                    for ci in 0..*c {
                                        let pk = p.data()[idx(ci)].as_f64();
                                        let qk = out.data()[idx(ci)].as_f64();
                                        let d = if pk > 0.0 {
                                            inv_t / pk * qk * (g[idx(ci)].as_f64() - dotp)
                                        } else {
                                            0.0
                                        };
                                        dx.data_mut()[idx(ci)] = T::of(d);
                                    }
                                }
                            }
                            dx
                        }
                        _ => {
                            let data = p
                                .data()
                                .iter()
                                .zip(out.data())
                                .zip(g)
                                .map(|((&pv, &sv), &gg)| {
                                    T::of(gg.as_f64() * sharpen_binary_slope(pv.as_f64(), sv.as_f64(), inv_t))
                                })
                                .collect();
                            Tensor::new(p.shape(), data)?
                        }
                    };
                    res.push((*input, dx));
                }
            }
        }
        Ok(res)
    }
}

/// Two-outcome temperature sharpening of a single probability, evaluated in
/// double precision.
pub fn sharpen_scalar(p: f64, temperature: f64) -> f64 {
    sharpen_binary(p, 1.0 / temperature)
}
