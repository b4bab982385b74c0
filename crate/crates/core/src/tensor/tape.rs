//! Reverse-mode differentiation over a linear recording tape.
//!
//! Every operation appends a node after its operands, so the tape is always
//! in topological order and a single reverse sweep visits each node once.

use super::kernels::{self, ConvGeom};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride-1 3×3-friendly parameters that preserve spatial size: padding = dilation.
    pub fn same(dilation: usize) -> Self {
        Self::new(1, dilation, dilation)
    }

    /// Strided dilated convolution with stride = dilation = padding = `factor`.
    pub fn strided_dilated(factor: usize) -> Self {
        Self::new(factor, factor, factor)
    }

    pub fn pointwise() -> Self {
        Self::new(1, 1, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    ChannelGate {
        x: Var,
        gate: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    Square(Var),
    Ln(Var),
    Powf {
        x: Var,
        exponent: T,
    },
    Sum(Var),
    SumPerSample(Var),
    Attached {
        x: Var,
        grad: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    retain_grad: bool,
    op: Op<T>,
}

/// Run-scoped recording of tensor operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn mismatch(op: &'static str, dim: &'static str, left: usize, right: usize) -> TensorError {
    TensorError::Mismatch { op, dim, left, right }
}

fn extent_or_err(op: &'static str, dim: &'static str, extent: i64) -> Result<usize> {
    if extent < 1 {
        Err(TensorError::EmptyOutput { op, dim, extent })
    } else {
        Ok(extent as usize)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            retain_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, or of a node marked with [`Tape::retain_grad`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Keep the gradient of an intermediate node after backward sweeps.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain_grad = true;
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            retain_grad: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.value(v).dims4().map_err(|_| TensorError::Rank {
            op,
            expected: 4,
            actual: self.shape(v).to_vec(),
        })
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            let n = self.value(b).numel();
            if n != channels {
                return Err(mismatch(op, "bias length", n, channels));
            }
        }
        Ok(())
    }

    /// 2-D convolution. `w` is `out_ch × in_ch × kH × kW`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c, h, wd) = self.dims4(OP, x)?;
        let (co, ci, kh, kw) = self.dims4(OP, w)?;
        if ci != c {
            return Err(mismatch(OP, "input channels", c, ci));
        }
        if p.stride == 0 || p.dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "stride and dilation must be positive".into(),
            });
        }
        self.check_bias(OP, b, co)?;
        let oh = extent_or_err(
            OP,
            "height",
            kernels::conv_output_extent(h, kh, p.stride, p.dilation, p.padding),
        )?;
        let ow = extent_or_err(
            OP,
            "width",
            kernels::conv_output_extent(wd, kw, p.stride, p.dilation, p.padding),
        )?;
        let geom = ConvGeom {
            cin: c,
            h,
            w: wd,
            cout: co,
            kh,
            kw,
            stride: p.stride,
            dilation: p.dilation,
            padding: p.padding,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            &inputs,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch: n,
            },
        ))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// weight tensor: `w` is `in_ch × out_ch × kH × kW` from this op's view.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (n, c, h, wd) = self.dims4(OP, x)?;
        let (wi, wo, kh, kw) = self.dims4(OP, w)?;
        if wi != c {
            return Err(mismatch(OP, "input channels", c, wi));
        }
        if p.stride == 0 || p.dilation == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "stride and dilation must be positive".into(),
            });
        }
        self.check_bias(OP, b, wo)?;
        let oh = extent_or_err(
            OP,
            "height",
            kernels::conv_transpose_output_extent(h, kh, p.stride, p.dilation, p.padding),
        )?;
        let ow = extent_or_err(
            OP,
            "width",
            kernels::conv_transpose_output_extent(wd, kw, p.stride, p.dilation, p.padding),
        )?;
        // geometry of the forward convolution this op is the adjoint of
        let geom = ConvGeom {
            cin: wo,
            h: oh,
            w: ow,
            cout: c,
            kh,
            kw,
            stride: p.stride,
            dilation: p.dilation,
            padding: p.padding,
            oh: h,
            ow: wd,
        };
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![n, wo, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            &inputs,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch: n,
            },
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        const OP: &str = "avg_pool2d";
        let (n, c, h, w) = self.dims4(OP, x)?;
        if window == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "window and stride must be positive".into(),
            });
        }
        if window > h || window > w {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("window {window} larger than input {h}×{w}"),
            });
        }
        let oh = kernels::pool_output_extent(h, window, stride) as usize;
        let ow = kernels::pool_output_extent(w, window, stride) as usize;
        let out = kernels::avg_pool_forward(self.value(x).data(), n * c, h, w, window, stride, oh, ow);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, &[x], Op::AvgPool { x, window, stride }))
    }

    /// Batch normalization over `(batch, height, width)` per channel.
    ///
    /// Train mode normalizes by batch statistics and folds them into `stats`
    /// with an exponential moving average (unbiased variance); infer mode uses
    /// `stats` directly.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BatchNormMode,
        momentum: T,
        epsilon: T,
    ) -> Result<Var> {
        const OP: &str = "batch_norm2d";
        let (n, c, h, w) = self.dims4(OP, x)?;
        for (v, dim) in [(gamma, "gamma length"), (beta, "beta length")] {
            if self.value(v).numel() != c {
                return Err(mismatch(OP, dim, self.value(v).numel(), c));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(mismatch(OP, "running stats length", stats.mean.len(), c));
        }
        if epsilon.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: "epsilon must be positive".into(),
            });
        }
        let hw = h * w;
        let count = n * hw;
        let xs = self.value(x).data();
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        match mode {
            BatchNormMode::Train => {
                let m = T::of(count as f64);
                for ch in 0..c {
                    let mut sum = T::zero();
                    for b in 0..n {
                        sum = sum + xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mean = sum / m;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            sq = sq + (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / m;
                    means[ch] = mean;
                    inv_std[ch] = T::one() / (var + epsilon).sqrt();
                    let unbiased = if count > 1 { sq / T::of((count - 1) as f64) } else { var };
                    stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean;
                    stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                }
            }
            BatchNormMode::Infer => {
                for ch in 0..c {
                    means[ch] = stats.mean[ch];
                    inv_std[ch] = T::one() / (stats.var[ch] + epsilon).sqrt();
                }
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut x_hat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in range {
                    let xh = (xs[i] - means[ch]) * inv_std[ch];
                    x_hat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let train = mode == BatchNormMode::Train;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v <= T::zero() { T::zero() } else { v });
        self.push(value, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, &[x], Op::Sigmoid(x))
    }

    /// Depth-wise (channel axis) concatenation in argument order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: OP,
            msg: "no parts".into(),
        })?;
        let (n, _, h, w) = self.dims4(OP, first)?;
        let mut channels = 0;
        for (index, &p) in parts.iter().enumerate() {
            match self.value(p).dims4() {
                Ok((pn, pc, ph, pw)) if (pn, ph, pw) == (n, h, w) => channels += pc,
                _ => {
                    return Err(TensorError::ConcatMismatch {
                        index,
                        expected: [n, h, w],
                        actual: self.shape(p).to_vec(),
                    })
                }
            }
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * hw;
                out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let value = Tensor::new(vec![n, channels, h, w], out)?;
        Ok(self.push(value, parts, Op::Concat(parts.to_vec())))
    }

    /// Spatial window `[top, top+height) × [left, left+width)` of every plane.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        const OP: &str = "crop2d";
        let (n, c, h, w) = self.dims4(OP, x)?;
        if height == 0 || width == 0 || top + height > h || left + width > w {
            return Err(TensorError::InvalidArgument {
                op: OP,
                msg: format!("window {height}×{width} at ({top},{left}) exceeds {h}×{w}"),
            });
        }
        if (top, left, height, width) == (0, 0, h, w) {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * height * width);
        for plane in src.chunks(h * w) {
            for y in top..top + height {
                out.extend_from_slice(&plane[y * w + left..y * w + left + width]);
            }
        }
        let value = Tensor::new(vec![n, c, height, width], out)?;
        Ok(self.push(value, &[x], Op::Crop { x, top, left }))
    }

    /// `x · gate` with a single-channel `gate` broadcast over `x`'s channels.
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        const OP: &str = "channel_gate";
        let (n, c, h, w) = self.dims4(OP, x)?;
        let (gn, gc, gh, gw) = self.dims4(OP, gate)?;
        if gc != 1 {
            return Err(mismatch(OP, "gate channels", gc, 1));
        }
        if (gn, gh, gw) != (n, h, w) {
            return Err(mismatch(OP, "gate batch/spatial size", gn * gh * gw, n * h * w));
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let gs = self.value(gate).data();
        let mut out = Vec::with_capacity(xs.len());
        for b in 0..n {
            let gp = &gs[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let xp = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                out.extend(xp.iter().zip(gp).map(|(&a, &g)| a * g));
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, &[x, gate], Op::ChannelGate { x, gate }))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, "element count", ta.numel(), tb.numel()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, &[a, b], Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, &[a, b], Op::Div(a, b)))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push(v, &[x], Op::Affine { x, scale })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, &[x], Op::Square(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.ln());
        self.push(v, &[x], Op::Ln(x))
    }

    /// `x^exponent` for nonnegative `x`.
    pub fn powf(&mut self, x: Var, exponent: T) -> Var {
        let v = self.value(x).map(|e| e.powf(exponent));
        self.push(v, &[x], Op::Powf { x, exponent })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, &[x], Op::Sum(x))
    }

    /// Sum over every axis but the first: `(N, ...) → (N)`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.numel() / n;
        let data = t.data().chunks(per).map(|c| c.iter().copied().sum()).collect();
        let v = Tensor::new(vec![n], data).expect("nonzero batch");
        self.push(v, &[x], Op::SumPerSample(x))
    }

    /// Scalar node holding `value`, with `∂value/∂x` supplied as `grad`.
    /// Lets losses whose gradients are derived in closed form end a recorded graph.
    pub fn attach_scalar(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(x) {
            return Err(mismatch(
                "attach_scalar",
                "gradient element count",
                grad.numel(),
                self.value(x).numel(),
            ));
        }
        let grad = grad.into_data();
        Ok(self.push(Tensor::scalar(value), &[x], Op::Attached { x, grad }))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_from(loss, Tensor::full(shape, T::one()))
    }

    /// Reverse sweep seeded with an explicit upstream gradient for `out`.
    pub fn backward_from(&mut self, out: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.shape(out) {
            return Err(mismatch(
                "backward",
                "seed element count",
                seed.numel(),
                self.value(out).numel(),
            ));
        }
        if !self.nodes[out.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            if node.retain_grad {
                accumulate(&mut self.nodes[i], &g)?;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                accumulate(&mut self.nodes[i], &g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.numel();
        let val = |v: Var| nodes[v.0].value.data();
        // lazily materialize the gradient buffer of an operand
        fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        let out_val = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, batch } => {
                let mut dx = needs(*x).then(|| vec![T::zero(); len(*x)]);
                let mut dw = needs(*w).then(|| vec![T::zero(); len(*w)]);
                let mut db = b.filter(|b| needs(*b)).map(|b| vec![T::zero(); len(b)]);
                kernels::conv2d_backward(
                    val(*x),
                    *batch,
                    val(*w),
                    geom,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                add_into(grads, *x, dx);
                add_into(grads, *w, dw);
                if let Some(b) = b {
                    add_into(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, batch } => {
                let mut dx = needs(*x).then(|| vec![T::zero(); len(*x)]);
                let mut dw = needs(*w).then(|| vec![T::zero(); len(*w)]);
                let mut db = b.filter(|b| needs(*b)).map(|b| vec![T::zero(); len(b)]);
                kernels::conv_transpose2d_backward(
                    val(*x),
                    *batch,
                    val(*w),
                    geom,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                add_into(grads, *x, dx);
                add_into(grads, *w, dw);
                if let Some(b) = b {
                    add_into(grads, *b, db);
                }
            }
            Op::AvgPool { x, window, stride } => {
                if needs(*x) {
                    let (n, c, h, w) = nodes[x.0].value.dims4().expect("rank 4");
                    let (_, _, oh, ow) = nodes[i].value.dims4().expect("rank 4");
                    let dx = slot(grads, *x, n * c * h * w);
                    kernels::avg_pool_backward(g, n * c, h, w, *window, *stride, oh, ow, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = nodes[x.0].value.dims4().expect("rank 4");
                let hw = h * w;
                let gam = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for j in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dgamma[ch] = dgamma[ch] + g[j] * x_hat[j];
                            dbeta[ch] = dbeta[ch] + g[j];
                        }
                    }
                }
                if needs(*x) {
                    let dx = slot(grads, *x, n * c * hw);
                    let m = T::of((n * hw) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            for j in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                let d = if *train {
                                    k * (g[j] - dbeta[ch] / m - x_hat[j] * dgamma[ch] / m)
                                } else {
                                    k * g[j]
                                };
                                dx[j] = dx[j] + d;
                            }
                        }
                    }
                }
                if needs(*gamma) {
                    add_into(grads, *gamma, Some(dgamma));
                }
                if needs(*beta) {
                    add_into(grads, *beta, Some(dbeta));
                }
            }
            Op::Relu(x) => {
                let xs = val(*x);
                let dx = slot(grads, *x, xs.len());
                for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xs) {
                    if xi > T::zero() {
                        *d = *d + gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let dx = slot(grads, *x, out_val.len());
                for ((d, &gi), &s) in dx.iter_mut().zip(g).zip(out_val) {
                    *d = *d + gi * s * (T::one() - s);
                }
            }
            Op::Concat(parts) => {
                let (n, _, h, w) = nodes[i].value.dims4().expect("rank 4");
                let hw = h * w;
                let total: usize = nodes[i].value.shape()[1] * hw;
                let mut offset = 0;
                for &p in parts {
                    let per = nodes[p.0].value.shape()[1] * hw;
                    if needs(p) {
                        let dp = slot(grads, p, n * per);
                        for b in 0..n {
                            let src = &g[b * total + offset..b * total + offset + per];
                            for (d, &s) in dp[b * per..(b + 1) * per].iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                    offset += per;
                }
            }
            Op::Crop { x, top, left } => {
                let (_, _, h, w) = nodes[x.0].value.dims4().expect("rank 4");
                let (_, _, ch, cw) = nodes[i].value.dims4().expect("rank 4");
                let dx = slot(grads, *x, len(*x));
                for (plane, src) in dx.chunks_mut(h * w).zip(g.chunks(ch * cw)) {
                    for y in 0..ch {
                        let row = &mut plane[(top + y) * w + left..(top + y) * w + left + cw];
                        for (d, &s) in row.iter_mut().zip(&src[y * cw..(y + 1) * cw]) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::ChannelGate { x, gate } => {
                let (n, c, h, w) = nodes[x.0].value.dims4().expect("rank 4");
                let hw = h * w;
                let xs = val(*x);
                let gs = val(*gate);
                if needs(*x) {
                    let dx = slot(grads, *x, xs.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for j in 0..hw {
                                dx[base + j] = dx[base + j] + g[base + j] * gs[b * hw + j];
                            }
                        }
                    }
                }
                if needs(*gate) {
                    let dg = slot(grads, *gate, gs.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for j in 0..hw {
                                dg[b * hw + j] = dg[b * hw + j] + g[base + j] * xs[base + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_slice(slot(grads, v, g.len()), g, |gi, _| gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_slice(slot(grads, *a, g.len()), g, |gi, _| gi);
                }
                if needs(*b) {
                    add_slice(slot(grads, *b, g.len()), g, |gi, _| -gi);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = val(*b);
                    add_slice(slot(grads, *a, g.len()), g, |gi, j| gi * other[j]);
                }
                if needs(*b) {
                    let other = val(*a);
                    add_slice(slot(grads, *b, g.len()), g, |gi, j| gi * other[j]);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if needs(*a) {
                    add_slice(slot(grads, *a, g.len()), g, |gi, j| gi / bv[j]);
                }
                if needs(*b) {
                    add_slice(slot(grads, *b, g.len()), g, |gi, j| -gi * out_val[j] / bv[j]);
                }
            }
            Op::Affine { x, scale } => {
                add_slice(slot(grads, *x, g.len()), g, |gi, _| gi * *scale);
            }
            Op::Square(x) => {
                let xs = val(*x);
                let two = T::of(2.0);
                add_slice(slot(grads, *x, g.len()), g, |gi, j| gi * two * xs[j]);
            }
            Op::Ln(x) => {
                let xs = val(*x);
                add_slice(slot(grads, *x, g.len()), g, |gi, j| gi / xs[j]);
            }
            Op::Powf { x, exponent } => {
                let xs = val(*x);
                let e = *exponent;
                add_slice(slot(grads, *x, g.len()), g, |gi, j| {
                    if xs[j] == T::zero() && e > T::one() {
                        T::zero()
                    } else {
                        gi * e * xs[j].powf(e - T::one())
                    }
                });
            }
            Op::Sum(x) => {
                let n = len(*x);
                let dx = slot(grads, *x, n);
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::SumPerSample(x) => {
                let n = len(*x);
                let per = n / g.len();
                let dx = slot(grads, *x, n);
                for (chunk, &gi) in dx.chunks_mut(per).zip(g) {
                    chunk.iter_mut().for_each(|d| *d = *d + gi);
                }
            }
            Op::Attached { x, grad } => {
                add_slice(slot(grads, *x, grad.len()), grad, |gi, _| gi * g[0]);
            }
        }
    }
}

fn accumulate<T: Real>(node: &mut Node<T>, g: &[T]) -> Result<()> {
    match &mut node.grad {
        Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g.to_vec())?),
    }
    Ok(())
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn add_slice<T: Real>(dst: &mut [T], g: &[T], f: impl Fn(T, usize) -> T) {
    for (j, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *d = *d + f(gi, j);
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
