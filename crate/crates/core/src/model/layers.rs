//! Parameter registry and the building blocks the network is assembled from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{BatchNormMode, ConvParams, Real, RunningStats, Tape, Tensor, Var};

use super::Result;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

/// One row of the model manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// Ordered parameters, batch-norm statistics, and layer descriptions.
#[derive(Clone, Debug)]
pub struct Registry<T> {
    pub params: Vec<Param<T>>,
    pub bn: Vec<BnStats<T>>,
    pub layers: Vec<LayerInfo>,
    rng: ChaCha8Rng,
}

impl<T: Real> Registry<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            bn: Vec::new(),
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn add_param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn he_normal(&mut self, shape: Vec<usize>, fan_in: f64) -> Tensor<T> {
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(&mut self.rng))).collect();
        Tensor::new(shape, data).expect("consistent shape")
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, p: ConvParams, bias: bool) -> Conv {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = self.he_normal(vec![cout, cin, kernel, kernel], fan_in);
        let w = self.add_param(format!("{name}.weight"), w);
        let b = bias.then(|| self.add_param(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: "conv2d",
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: p.stride,
            dilation: p.dilation,
            padding: p.padding,
            trainable: cout * cin * kernel * kernel + if bias { cout } else { 0 },
            non_trainable: 0,
        });
        Conv {
            w,
            b,
            params: p,
            transposed: false,
            out_channels: cout,
        }
    }

    /// Transposed convolution with `kernel = stride`, an exact `stride×` upsampling.
    pub fn upsample(&mut self, name: &str, cin: usize, cout: usize, factor: usize) -> Conv {
        let w = self.he_normal(vec![cin, cout, factor, factor], cin as f64);
        let w = self.add_param(format!("{name}.weight"), w);
        let b = Some(self.add_param(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: "conv_transpose2d",
            in_channels: cin,
            out_channels: cout,
            kernel: factor,
            stride: factor,
            dilation: 1,
            padding: 0,
            trainable: cin * cout * factor * factor + cout,
            non_trainable: 0,
        });
        Conv {
            w,
            b,
            params: ConvParams::new(factor, 1, 0),
            transposed: true,
            out_channels: cout,
        }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        let gamma = self.add_param(format!("{name}.gamma"), Tensor::ones(vec![channels]));
        let beta = self.add_param(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        self.bn.push(BnStats {
            name: name.to_string(),
            stats: RunningStats::new(channels),
        });
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: "batch_norm2d",
            in_channels: channels,
            out_channels: channels,
            kernel: 0,
            stride: 0,
            dilation: 0,
            padding: 0,
            trainable: 2 * channels,
            non_trainable: 2 * channels,
        });
        BatchNorm {
            gamma,
            beta,
            stats: self.bn.len() - 1,
        }
    }

    /// 3×3 (or 1×1) convolution without bias, batch norm, ReLU.
    pub fn cbr(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) -> Cbr {
        let p = ConvParams::new(1, 1, kernel / 2);
        Cbr {
            conv: self.conv(&format!("{name}.conv"), cin, cout, kernel, p, false),
            bn: self.batch_norm(&format!("{name}.bn"), cout),
        }
    }

    /// Parameter leaves on `tape`, in registry order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Registry<U> {
        Registry {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|b| BnStats {
                    name: b.name.clone(),
                    stats: RunningStats {
                        mean: b.stats.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                        var: b.stats.var.iter().map(|v| U::of(v.as_f64())).collect(),
                    },
                })
                .collect(),
            layers: self.layers.clone(),
            rng: self.rng.clone(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn non_trainable_count(&self) -> usize {
        self.bn.iter().map(|b| 2 * b.stats.mean.len()).sum()
    }
}

/// Forward-pass state shared by every block: the tape, the bound parameter
/// leaves, and the batch-norm statistics.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a [Var],
    pub bn: &'a mut [BnStats<T>],
    pub mode: BatchNormMode,
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: usize,
    b: Option<usize>,
    params: ConvParams,
    transposed: bool,
    pub out_channels: usize,
}

impl Conv {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.params[self.w];
        let b = self.b.map(|b| ctx.params[b]);
        Ok(if self.transposed {
            ctx.tape.conv_transpose2d(x, w, b, self.params)?
        } else {
            ctx.tape.conv2d(x, w, b, self.params)?
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: usize,
    beta: usize,
    stats: usize,
}

impl BatchNorm {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.params[self.gamma], ctx.params[self.beta]);
        let stats = &mut ctx.bn[self.stats].stats;
        Ok(ctx
            .tape
            .batch_norm2d(x, g, b, stats, ctx.mode, T::of(BN_MOMENTUM), T::of(BN_EPSILON))?)
    }
}

#[derive(Clone, Debug)]
pub struct Cbr {
    conv: Conv,
    bn: BatchNorm,
}

impl Cbr {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}

/// A strided dilated 3×3 convolution (stride = dilation = padding = factor),
/// restored to the input grid by a transposed convolution and a crop.
#[derive(Clone, Debug)]
pub struct Route {
    down: Conv,
    up: Option<Conv>,
}

impl Route {
    pub fn new<T: Real>(reg: &mut Registry<T>, name: &str, cin: usize, cout: usize, factor: usize) -> Self {
        let down = reg.conv(
            &format!("{name}.conv"),
            cin,
            cout,
            3,
            ConvParams::strided_dilated(factor),
            true,
        );
        let up = (factor > 1).then(|| reg.upsample(&format!("{name}.up"), cout, cout, factor));
        Self { down, up }
    }

    /// Output of the strided convolution and the restored map.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let (_, _, h, w) = ctx.tape.value(x).dims4()?;
        let low = self.down.forward(ctx, x)?;
        let Some(up) = &self.up else { return Ok((low, low)) };
        let restored = up.forward(ctx, low)?;
        Ok((low, ctx.tape.crop2d(restored, 0, 0, h, w)?))
    }

    pub fn out_channels(&self) -> usize {
        self.down.out_channels
    }
}

/// Size-preserving gate: two conv+BN+ReLU layers reduce the input to one
/// sigmoid mask that multiplies a 3×3 projection of the input.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    mask1: Cbr,
    mask2: Cbr,
    mask_out: Conv,
    proj: Conv,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub gate: Var,
    pub output: Var,
}

impl AttentionBlock {
    pub fn new<T: Real>(reg: &mut Registry<T>, name: &str, cin: usize, width: usize) -> Self {
        Self {
            mask1: reg.cbr(&format!("{name}.mask1"), cin, width, 3),
            mask2: reg.cbr(&format!("{name}.mask2"), width, width, 3),
            mask_out: reg.conv(&format!("{name}.mask_out"), width, 1, 1, ConvParams::pointwise(), true),
            proj: reg.conv(&format!("{name}.proj"), cin, width, 3, ConvParams::same(1), true),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<AttentionOutput> {
        let m = self.mask1.forward(ctx, x)?;
        let m = self.mask2.forward(ctx, m)?;
        let m = self.mask_out.forward(ctx, m)?;
        let gate = ctx.tape.sigmoid(m);
        let proj = self.proj.forward(ctx, x)?;
        let output = ctx.tape.channel_gate(proj, gate)?;
        Ok(AttentionOutput { gate, output })
    }

    pub fn out_channels(&self) -> usize {
        self.proj.out_channels
    }
}

/// Batch norm and ReLU on the input, then four 3×3 convolutions of equal width
/// with ReLU between them.
#[derive(Clone, Debug)]
pub struct FeatureEnhancer {
    bn: BatchNorm,
    convs: Vec<Conv>,
}

impl FeatureEnhancer {
    pub fn new<T: Real>(reg: &mut Registry<T>, name: &str, cin: usize, width: usize) -> Self {
        let bn = reg.batch_norm(&format!("{name}.bn"), cin);
        let convs = (0..4)
            .map(|i| {
                let c = if i == 0 { cin } else { width };
                reg.conv(&format!("{name}.conv{}", i + 1), c, width, 3, ConvParams::same(1), true)
            })
            .collect();
        Self { bn, convs }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.bn.forward(ctx, x)?;
        let mut y = ctx.tape.relu(y);
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                y = ctx.tape.relu(y);
            }
            y = conv.forward(ctx, y)?;
        }
        Ok(y)
    }

    pub fn out_channels(&self) -> usize {
        self.convs[3].out_channels
    }
}
