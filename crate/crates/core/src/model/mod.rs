//! The segmentation network: a stem, three fusion stages, and a sigmoid head.
//!
//! ```text
//! image (H) ─ stem ─ F (H/2)
//! stage A  F_a = conv(F), F_i = BN·ReLU(F_a)
//!          F_1, F_2↑, F_4↑ = routes on F_i, AF_A = attention(F_i)
//!          DF_A = [F_a] ⊗ F_1 ⊗ F_2↑ ⊗ F_4↑
//! stage B  (H/4) M = CBR(pool(DF_A)), AF_i = CBR(pool(AF_A))
//!          E_1, E_2↑, E_4↑ = routes on M, AF_B = pool(enhancer(F))
//!          DF_B = [AF_i] ⊗ E_1 ⊗ E_2↑ ⊗ E_4↑ ⊗ [AF_B]
//! stage C  DF_C = up(DF_B) ⊗ [AF_A]   (H/2)
//! head     [1×1 bottleneck] → up → BN·ReLU → 3×3 conv → sigmoid   (H)
//! ```
//!
//! Bracketed terms depend on the ablation flags.

mod gradcam;
mod layers;

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BatchNormMode, ConvParams, Real, Tape, Tensor, TensorError, Var};

pub use gradcam::{grad_cam, CamLayer};
pub use layers::{
    AttentionBlock, AttentionOutput, BatchNorm, BnStats, Cbr, Conv, Ctx, FeatureEnhancer, LayerInfo, Param, Registry,
    Route, BN_EPSILON, BN_MOMENTUM,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input must be (batch, 3, H, W) with H and W divisible by 4, got {0:?}")]
    InputShape(Vec<usize>),
    #[error("input values must lie in [0, 1]")]
    InputRange,
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// The four ablation networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No skip path, attention, or enhancer.
    Network1,
    /// Skip path only.
    Network2,
    /// Feature enhancer only.
    Network3,
    /// Skip path, both attention modules, and the enhancer.
    Network4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Network1,
        Variant::Network2,
        Variant::Network3,
        Variant::Network4,
    ];

    /// `(skip path, attention, enhancer)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::Network1 => (false, false, false),
            Variant::Network2 => (true, false, false),
            Variant::Network3 => (false, false, true),
            Variant::Network4 => (true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Network1 => "network1",
            Variant::Network2 => "network2",
            Variant::Network3 => "network3",
            Variant::Network4 => "network4",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub base_channels: usize,
    pub attention_channels: usize,
    pub enhancer_channels: usize,
    pub bottleneck_channels: usize,
    pub route_dilations: [usize; 3],
    pub route_strides: [usize; 3],
    pub enable_skip_path: bool,
    pub enable_attention: bool,
    pub enable_enhancer: bool,
    pub bottleneck: bool,
    pub deep_supervision: bool,
    /// `(height, width)`.
    pub input_size: [usize; 2],
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-size network, about 1.4 million parameters.
    pub fn full() -> Self {
        Self {
            stem_channels: 16,
            base_channels: 96,
            attention_channels: 96,
            enhancer_channels: 16,
            bottleneck_channels: 16,
            route_dilations: [1, 2, 4],
            route_strides: [1, 2, 4],
            enable_skip_path: true,
            enable_attention: true,
            enable_enhancer: true,
            bottleneck: true,
            deep_supervision: false,
            input_size: [288, 384],
            init_seed: 0,
        }
    }

    /// Small network for CPU experiments and gradient checks.
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            base_channels: 12,
            attention_channels: 12,
            enhancer_channels: 8,
            bottleneck_channels: 8,
            input_size: [64, 96],
            ..Self::full()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.enable_skip_path, self.enable_attention, self.enable_enhancer) = v.flags();
        self
    }

    /// The ablation network these flags realize, if any.
    pub fn variant(&self) -> Option<Variant> {
        let flags = (self.enable_skip_path, self.enable_attention, self.enable_enhancer);
        Variant::ALL.into_iter().find(|v| v.flags() == flags)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if ![8, 16].contains(&self.enhancer_channels) {
            return bad(format!(
                "enhancer_channels must be 8 or 16, got {}",
                self.enhancer_channels
            ));
        }
        for (name, v) in [
            ("stem_channels", self.stem_channels),
            ("base_channels", self.base_channels),
            ("attention_channels", self.attention_channels),
            ("bottleneck_channels", self.bottleneck_channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.route_dilations != self.route_strides {
            return bad(format!(
                "route strides {:?} must equal route dilations {:?}",
                self.route_strides, self.route_dilations
            ));
        }
        if self.route_dilations.contains(&0) {
            return bad("route factors must be positive".into());
        }
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return bad(format!("input size {h}×{w} must be divisible by 4"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

#[derive(Clone, Debug)]
struct Blocks {
    stem1: Cbr,
    stem2: Cbr,
    a_conv: Conv,
    a_bn: BatchNorm,
    a_routes: Vec<Route>,
    attention: Option<AttentionBlock>,
    b_trunk: Cbr,
    b_attention: Option<Cbr>,
    b_routes: Vec<Route>,
    enhancer: Option<FeatureEnhancer>,
    c_up: Conv,
    bottleneck: Option<Cbr>,
    head_up: Conv,
    head_bn: BatchNorm,
    head: Conv,
    aux: Option<(Conv, Conv)>,
}

/// Intermediate features of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub f: Var,
    pub f_a: Var,
    pub f_i: Var,
    /// `F_1`, `F_2↑`, `F_4↑`.
    pub f_routes: [Var; 3],
    /// Strided route outputs before upsampling.
    pub f_low: [Var; 3],
    pub af_a: Option<AttentionOutput>,
    pub df_a: Var,
    pub af_i: Option<Var>,
    pub e_routes: [Var; 3],
    pub af_b: Option<Var>,
    pub df_b: Var,
    pub df_c: Var,
    pub bottleneck: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(batch, 1, H, W)` probabilities.
    pub prob: Var,
    /// Deep-supervision probabilities at `H/2` and `H/4`, when enabled.
    pub aux: Vec<Var>,
    pub features: Features,
}

#[derive(Clone, Debug)]
pub struct MmccNet<T> {
    config: ModelConfig,
    registry: Registry<T>,
    blocks: Blocks,
}

pub fn build_mmcc_net<T: Real>(config: &ModelConfig) -> Result<MmccNet<T>> {
    MmccNet::new(config)
}

impl<T: Real> MmccNet<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut reg = Registry::new(config.init_seed);
        let (s, c, a) = (config.stem_channels, config.base_channels, config.attention_channels);
        let (e, b) = (config.enhancer_channels, config.bottleneck_channels);
        let factors = config.route_dilations;

        let stem1 = reg.cbr("stem.cbr1", 3, s, 3);
        let stem2 = reg.cbr("stem.cbr2", s, s, 3);

        let a_conv = reg.conv("stage_a.conv", s, c, 3, ConvParams::same(1), true);
        let a_bn = reg.batch_norm("stage_a.bn", c);
        let a_routes = factors
            .iter()
            .map(|&f| Route::new(&mut reg, &format!("stage_a.route{f}"), c, c, f))
            .collect();
        let attention = config
            .enable_attention
            .then(|| AttentionBlock::new(&mut reg, "stage_a.attention", c, a));
        let df_a = 3 * c + if config.enable_skip_path { c } else { 0 };

        let b_trunk = reg.cbr("stage_b.trunk", df_a, c, 1);
        let b_attention = config.enable_attention.then(|| reg.cbr("stage_b.attention", a, a, 3));
        let b_routes = factors
            .iter()
            .map(|&f| Route::new(&mut reg, &format!("stage_b.route{f}"), c, c, f))
            .collect();
        let enhancer = config
            .enable_enhancer
            .then(|| FeatureEnhancer::new(&mut reg, "stage_b.enhancer", s, e));
        let df_b = 3 * c + if config.enable_attention { a } else { 0 } + if config.enable_enhancer { e } else { 0 };

        let c_up = reg.upsample("stage_c.up", df_b, c, 2);
        let df_c = c + if config.enable_attention { a } else { 0 };
        let bottleneck = config.bottleneck.then(|| reg.cbr("stage_c.bottleneck", df_c, b, 1));
        let head_in = if config.bottleneck { b } else { df_c };
        let head_up = reg.upsample("head.up", head_in, head_in, 2);
        let head_bn = reg.batch_norm("head.bn", head_in);
        let head = reg.conv("head.out", head_in, 1, 3, ConvParams::same(1), true);
        let aux = config.deep_supervision.then(|| {
            (
                reg.conv("aux.stage_a", df_a, 1, 1, ConvParams::pointwise(), true),
                reg.conv("aux.stage_b", df_b, 1, 1, ConvParams::pointwise(), true),
            )
        });
        Ok(Self {
            config: config.clone(),
            registry: reg,
            blocks: Blocks {
                stem1,
                stem2,
                a_conv,
                a_bn,
                a_routes,
                attention,
                b_trunk,
                b_attention,
                b_routes,
                enhancer,
                c_up,
                bottleneck,
                head_up,
                head_bn,
                head,
                aux,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.registry.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.registry.params
    }

    pub fn bn_stats(&self) -> &[BnStats<T>] {
        &self.registry.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BnStats<T>] {
        &mut self.registry.bn
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.registry.layers
    }

    /// Parameter leaves on `tape`, in registry order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.registry.bind(tape, requires_grad)
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let trainable = self.registry.trainable_count();
        let non_trainable = self.registry.non_trainable_count();
        ParameterCount {
            total: trainable + non_trainable,
            trainable,
            non_trainable,
        }
    }

    /// Same network at another precision.
    pub fn cast<U: Real>(&self) -> MmccNet<U> {
        let registry = self.registry.cast();
        MmccNet {
            config: self.config.clone(),
            registry,
            blocks: self.blocks.clone(),
        }
    }

    pub fn check_input(images: &Tensor<T>) -> Result<()> {
        match images.shape() {
            &[_, 3, h, w] if h % 4 == 0 && w % 4 == 0 => {}
            s => return Err(ModelError::InputShape(s.to_vec())),
        }
        if images.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(ModelError::InputRange);
        }
        Ok(())
    }

    /// Record the network on `tape` using the bound parameter leaves `params`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        images: Var,
        mode: BatchNormMode,
    ) -> Result<ForwardOutput> {
        Self::check_input(tape.value(images))?;
        let bl = &self.blocks;
        let mut ctx = Ctx {
            tape,
            params,
            bn: &mut self.registry.bn,
            mode,
        };

        let x = bl.stem1.forward(&mut ctx, images)?;
        let x = bl.stem2.forward(&mut ctx, x)?;
        let f = ctx.tape.avg_pool2d(x, 2, 2)?;

        let f_a = bl.a_conv.forward(&mut ctx, f)?;
        let f_i = bl.a_bn.forward(&mut ctx, f_a)?;
        let f_i = ctx.tape.relu(f_i);
        let mut f_routes = [f_i; 3];
        let mut f_low = [f_i; 3];
        for (k, route) in bl.a_routes.iter().enumerate() {
            (f_low[k], f_routes[k]) = route.forward(&mut ctx, f_i)?;
        }
        let af_a = match &bl.attention {
            Some(att) => Some(att.forward(&mut ctx, f_i)?),
            None => None,
        };
        let mut parts = Vec::with_capacity(4);
        if self.config.enable_skip_path {
            parts.push(f_a);
        }
        parts.extend(f_routes);
        let df_a = ctx.tape.concat_channels(&parts)?;

        let pooled = ctx.tape.avg_pool2d(df_a, 2, 2)?;
        let m = bl.b_trunk.forward(&mut ctx, pooled)?;
        let af_i = match (&bl.b_attention, af_a) {
            (Some(block), Some(att)) => {
                let p = ctx.tape.avg_pool2d(att.output, 2, 2)?;
                Some(block.forward(&mut ctx, p)?)
            }
            _ => None,
        };
        let mut e_routes = [m; 3];
        for (k, route) in bl.b_routes.iter().enumerate() {
            e_routes[k] = route.forward(&mut ctx, m)?.1;
        }
        let af_b = match &bl.enhancer {
            Some(fe) => {
                let y = fe.forward(&mut ctx, f)?;
                Some(ctx.tape.avg_pool2d(y, 2, 2)?)
            }
            None => None,
        };
        let mut parts = Vec::with_capacity(5);
        parts.extend(af_i);
        parts.extend(e_routes);
        parts.extend(af_b);
        let df_b = ctx.tape.concat_channels(&parts)?;

        let up = bl.c_up.forward(&mut ctx, df_b)?;
        let mut parts = vec![up];
        parts.extend(af_a.map(|a| a.output));
        let df_c = ctx.tape.concat_channels(&parts)?;
        let bottleneck = match &bl.bottleneck {
            Some(bn) => Some(bn.forward(&mut ctx, df_c)?),
            None => None,
        };
        let y = bl.head_up.forward(&mut ctx, bottleneck.unwrap_or(df_c))?;
        let y = bl.head_bn.forward(&mut ctx, y)?;
        let y = ctx.tape.relu(y);
        let logits = bl.head.forward(&mut ctx, y)?;
        let prob = ctx.tape.sigmoid(logits);

        let mut aux = Vec::new();
        if let Some((ha, hb)) = &bl.aux {
            for (head, feat) in [(ha, df_a), (hb, df_b)] {
                let l = head.forward(&mut ctx, feat)?;
                aux.push(ctx.tape.sigmoid(l));
            }
        }
        Ok(ForwardOutput {
            prob,
            aux,
            features: Features {
                f,
                f_a,
                f_i,
                f_routes,
                f_low,
                af_a,
                df_a,
                af_i,
                e_routes,
                af_b,
                df_b,
                df_c,
                bottleneck,
            },
        })
    }

    /// Probability maps in inference mode.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &params, x, BatchNormMode::Infer)?;
        Ok(tape.value(out.prob).clone())
    }

    /// Human-readable listing of every layer and the parameter totals.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let cfg = &self.config;
        let _ = writeln!(
            s,
            "# model manifest: variant {}, input {}x{}, init_seed {}",
            cfg.variant().map_or("custom", |v| v.name()),
            cfg.input_size[0],
            cfg.input_size[1],
            cfg.init_seed
        );
        let _ = writeln!(
            s,
            "{:<34} {:<17} {:>5} {:>5} {:>3} {:>3} {:>3} {:>3} {:>9} {:>6}",
            "name", "type", "in", "out", "k", "s", "d", "p", "trainable", "fixed"
        );
        for l in &self.registry.layers {
            let _ = writeln!(
                s,
                "{:<34} {:<17} {:>5} {:>5} {:>3} {:>3} {:>3} {:>3} {:>9} {:>6}",
                l.name,
                l.kind,
                l.in_channels,
                l.out_channels,
                l.kernel,
                l.stride,
                l.dilation,
                l.padding,
                l.trainable,
                l.non_trainable
            );
        }
        let count = self.count_parameters();
        let bn_channels: usize = self.registry.bn.iter().map(|b| b.stats.mean.len()).sum();
        let _ = writeln!(s, "batch_norm_channels {bn_channels}");
        let _ = writeln!(s, "trainable {}", count.trainable);
        let _ = writeln!(s, "non_trainable {}", count.non_trainable);
        let _ = writeln!(s, "total {}", count.total);
        s
    }
}
