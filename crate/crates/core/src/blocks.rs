//! Reusable building blocks: convolution layers, squeeze-and-excitation
//! gating and residual blocks.

use crate::error::{config_err, shape_err, Result};
use crate::graph::{Eager, Graph};
use crate::kernels;
use crate::params::{ParamId, ParamKind, ParameterSet};
use crate::real::Real;
use crate::tensor::{FeatureMap, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride-1 convolution that preserves spatial size.
    pub const fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }

    /// Strided convolution with `(kernel - 1) / 2` padding, so even inputs
    /// shrink by exactly `stride`.
    pub const fn strided(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(config_err!("conv channels and stride must be positive: {self:?}"));
        }
        if self.kernel % 2 == 0 {
            return Err(config_err!("conv kernel must be odd, got {}", self.kernel));
        }
        if self.stride == 1 && self.padding != (self.kernel - 1) / 2 {
            return Err(config_err!(
                "stride-1 conv must use shape-preserving padding {}, got {}",
                (self.kernel - 1) / 2,
                self.padding
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + self.out_channels
    }

    /// Multiply-accumulates for one sample of the given input size.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let os = kernels::conv_output_shape(Shape::new(1, self.in_channels, h, w), self)?;
        Ok((self.kernel * self.kernel * self.in_channels * self.out_channels) as u64 * os.plane() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SEBlockConfig {
    pub channels: usize,
    pub reduction: usize,
}

impl SEBlockConfig {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        let cfg = SEBlockConfig { channels, reduction };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 {
            return Err(config_err!("SE block needs positive channels and reduction"));
        }
        if self.channels % self.reduction != 0 {
            return Err(config_err!(
                "SE channels {} not divisible by reduction {}",
                self.channels,
                self.reduction
            ));
        }
        Ok(())
    }

    pub fn reduced(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn squeeze_spec(&self) -> ConvSpec {
        ConvSpec::same(self.channels, self.reduced(), 1)
    }

    pub fn excite_spec(&self) -> ConvSpec {
        ConvSpec::same(self.reduced(), self.channels, 1)
    }
}

/// A convolution layer bound to parameters in a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn register<T: Real>(ps: &mut ParameterSet<T>, name: &str, spec: ConvSpec) -> Self {
        debug_assert!(spec.validate().is_ok(), "{spec:?}");
        let weight = ps.register(format!("{name}.weight"), ParamKind::ConvWeight, spec.weight_shape());
        let bias = ps.register(
            format!("{name}.bias"),
            ParamKind::ConvBias,
            Shape::new(1, spec.out_channels, 1, 1),
        );
        Conv { spec, weight, bias }
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, &w, &b, &self.spec)
    }
}

/// Squeeze-and-excitation gate: `x * sigmoid(W2 relu(W1 gap(x)))`.
pub(crate) fn se_apply<T: Real, G: Graph<T>>(
    g: &mut G,
    x: &G::Var,
    cfg: &SEBlockConfig,
    w: [&G::Var; 4],
) -> Result<G::Var> {
    let c = g.shape(x).c;
    if c != cfg.channels {
        return Err(config_err!("SE block configured for {} channels, got {c}", cfg.channels));
    }
    let pooled = g.global_avg_pool(x);
    let z = g.conv2d(&pooled, w[0], w[1], &cfg.squeeze_spec())?;
    let z = g.relu(&z);
    let e = g.conv2d(&z, w[2], w[3], &cfg.excite_spec())?;
    let gate = g.sigmoid(&e);
    g.mul(x, &gate)
}

#[derive(Debug, Clone)]
pub struct SeBlock {
    pub cfg: SEBlockConfig,
    pub squeeze: Conv,
    pub excite: Conv,
}

impl SeBlock {
    pub fn register<T: Real>(ps: &mut ParameterSet<T>, name: &str, cfg: SEBlockConfig) -> Self {
        SeBlock {
            cfg,
            squeeze: Conv::register(ps, &format!("{name}.squeeze"), cfg.squeeze_spec()),
            excite: Conv::register(ps, &format!("{name}.excite"), cfg.excite_spec()),
        }
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let w = [
            g.param(self.squeeze.weight),
            g.param(self.squeeze.bias),
            g.param(self.excite.weight),
            g.param(self.excite.bias),
        ];
        se_apply(g, x, &self.cfg, [&w[0], &w[1], &w[2], &w[3]])
    }
}

/// `x + conv(relu(conv(x)))`, both convolutions 3x3 and shape-preserving.
pub(crate) fn residual_apply<T: Real, G: Graph<T>>(g: &mut G, x: &G::Var, w: [&G::Var; 4], channels: usize) -> Result<G::Var> {
    let c = g.shape(x).c;
    if c != channels {
        return Err(config_err!("residual block configured for {channels} channels, got {c}"));
    }
    let spec = ConvSpec::same(channels, channels, 3);
    let h = g.conv2d(x, w[0], w[1], &spec)?;
    let h = g.relu(&h);
    let h = g.conv2d(&h, w[2], w[3], &spec)?;
    g.add(x, &h)
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub channels: usize,
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResidualBlock {
    pub fn register<T: Real>(ps: &mut ParameterSet<T>, name: &str, channels: usize) -> Self {
        let spec = ConvSpec::same(channels, channels, 3);
        ResidualBlock {
            channels,
            conv1: Conv::register(ps, &format!("{name}.conv1"), spec),
            conv2: Conv::register(ps, &format!("{name}.conv2"), spec),
        }
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let w = [
            g.param(self.conv1.weight),
            g.param(self.conv1.bias),
            g.param(self.conv2.weight),
            g.param(self.conv2.bias),
        ];
        residual_apply(g, x, [&w[0], &w[1], &w[2], &w[3]], self.channels)
    }
}

/// Residual block followed by an SE gate. With SE disabled the gate is the
/// identity and registers no parameters.
#[derive(Debug, Clone)]
pub struct ResSeBlock {
    pub res: ResidualBlock,
    pub se: Option<SeBlock>,
}

impl ResSeBlock {
    pub fn register<T: Real>(ps: &mut ParameterSet<T>, name: &str, channels: usize, se: Option<usize>) -> Result<Self> {
        let res = ResidualBlock::register(ps, &format!("{name}.res"), channels);
        let se = match se {
            Some(r) => Some(SeBlock::register(ps, &format!("{name}.se"), SEBlockConfig::new(channels, r)?)),
            None => None,
        };
        Ok(ResSeBlock { res, se })
    }

    pub fn forward<T: Real, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let y = self.res.forward(g, x)?;
        match &self.se {
            Some(se) => se.forward(g, &y),
            None => Ok(y),
        }
    }
}

/// Optional SE gate: identity when disabled.
pub(crate) fn maybe_se<T: Real, G: Graph<T>>(se: &Option<SeBlock>, g: &mut G, x: G::Var) -> Result<G::Var> {
    match se {
        Some(se) => se.forward(g, &x),
        None => Ok(x),
    }
}

/// Weights of a standalone SE block.
#[derive(Debug, Clone)]
pub struct SeWeights<T> {
    pub cfg: SEBlockConfig,
    pub squeeze_weight: Tensor<T>,
    pub squeeze_bias: Tensor<T>,
    pub excite_weight: Tensor<T>,
    pub excite_bias: Tensor<T>,
}

impl<T: Real> SeWeights<T> {
    pub fn random(cfg: SEBlockConfig, rng: &mut impl rand::Rng) -> Self {
        let (s, e) = (cfg.squeeze_spec(), cfg.excite_spec());
        SeWeights {
            cfg,
            squeeze_weight: Tensor::uniform(s.weight_shape(), -1.0, 1.0, rng),
            squeeze_bias: Tensor::uniform(Shape::new(1, s.out_channels, 1, 1), -0.5, 0.5, rng),
            excite_weight: Tensor::uniform(e.weight_shape(), -1.0, 1.0, rng),
            excite_bias: Tensor::uniform(Shape::new(1, e.out_channels, 1, 1), -0.5, 0.5, rng),
        }
    }
}

/// Weights of a standalone residual block.
#[derive(Debug, Clone)]
pub struct ResidualWeights<T> {
    pub channels: usize,
    pub conv1_weight: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub conv2_weight: Tensor<T>,
    pub conv2_bias: Tensor<T>,
}

impl<T: Real> ResidualWeights<T> {
    pub fn random(channels: usize, scale: f64, rng: &mut impl rand::Rng) -> Self {
        let spec = ConvSpec::same(channels, channels, 3);
        let bs = Shape::new(1, channels, 1, 1);
        ResidualWeights {
            channels,
            conv1_weight: Tensor::uniform(spec.weight_shape(), -scale, scale, rng),
            conv1_bias: Tensor::uniform(bs, -scale, scale, rng),
            conv2_weight: Tensor::uniform(spec.weight_shape(), -scale, scale, rng),
            conv2_bias: Tensor::uniform(bs, -scale, scale, rng),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        let spec = ConvSpec::same(channels, channels, 3);
        let bs = Shape::new(1, channels, 1, 1);
        ResidualWeights {
            channels,
            conv1_weight: Tensor::zeros(spec.weight_shape()),
            conv1_bias: Tensor::zeros(bs),
            conv2_weight: Tensor::zeros(spec.weight_shape()),
            conv2_bias: Tensor::zeros(bs),
        }
    }
}

/// Standalone convolution on a feature map.
pub fn conv2d<T: Real>(x: &FeatureMap<T>, spec: &ConvSpec, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<FeatureMap<T>> {
    if x.shape().c != spec.in_channels {
        return Err(shape_err!(
            "conv expects {} channels, input has {}",
            spec.in_channels,
            x.shape().c
        ));
    }
    kernels::conv2d(x, spec, weights, bias)
}

/// Standalone SE gating of a feature map.
pub fn se_forward<T: Real>(x: &FeatureMap<T>, weights: &SeWeights<T>) -> Result<FeatureMap<T>> {
    let mut g = Eager::detached();
    let xv = g.constant(x.clone());
    let w = [
        g.constant(weights.squeeze_weight.clone()),
        g.constant(weights.squeeze_bias.clone()),
        g.constant(weights.excite_weight.clone()),
        g.constant(weights.excite_bias.clone()),
    ];
    let y = se_apply(&mut g, &xv, &weights.cfg, [&w[0], &w[1], &w[2], &w[3]])?;
    Ok(std::sync::Arc::unwrap_or_clone(y))
}

/// Standalone residual block on a feature map.
pub fn residual_forward<T: Real>(x: &FeatureMap<T>, weights: &ResidualWeights<T>) -> Result<FeatureMap<T>> {
    let mut g = Eager::detached();
    let xv = g.constant(x.clone());
    let w = [
        g.constant(weights.conv1_weight.clone()),
        g.constant(weights.conv1_bias.clone()),
        g.constant(weights.conv2_weight.clone()),
        g.constant(weights.conv2_bias.clone()),
    ];
    let y = residual_apply(&mut g, &xv, [&w[0], &w[1], &w[2], &w[3]], weights.channels)?;
    Ok(std::sync::Arc::unwrap_or_clone(y))
}
