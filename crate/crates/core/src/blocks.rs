//! Pre-activation building blocks with built-in drop operations.
//!
//! | kind                   | pipeline                                                   |
//! |------------------------|------------------------------------------------------------|
//! | `traditional_preact`   | BN -> ReLU -> Conv -> Drop                                 |
//! | `proposed_preact`      | BN -> ReLU -> Drop -> Conv                                 |
//! | `droppath_bottleneck`  | [BN-ReLU-1x1] [BN-ReLU-3x3/P groups] [BN-ReLU-gates-1x1] + X |
//! | `residual_droplayer`   | gate * ([BN-ReLU-Conv] [BN-ReLU-Conv]) + X                 |
//!
//! In the bottleneck the path gates sit on the `P * d` channels entering the
//! expanding 1x1 convolution. That convolution is linear, so gating there is
//! the same as gating each path's contribution to the output sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::drop::{
    drop_channel, drop_layer_gate, drop_neuron, drop_path_gates, keep_probs, scale_conv_inputs,
    scale_conv_outputs, DropLevel, DropMask, DropSpec, Scaling,
};
use crate::error::{config_err, Error, Result};
use crate::layers::{relu_backward, relu_forward, BatchNorm, Conv2d, ParamMut, Parameterized};
use crate::rng::{keyed_rng, stream_for, streams, DrawId};
use crate::tensor::{Real, Shape, Tensor};
use crate::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    TraditionalPreact,
    ProposedPreact,
    DroppathBottleneck,
    ResidualDroplayer,
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockKind::TraditionalPreact => "traditional_preact",
            BlockKind::ProposedPreact => "proposed_preact",
            BlockKind::DroppathBottleneck => "droppath_bottleneck",
            BlockKind::ResidualDroplayer => "residual_droplayer",
        })
    }
}

/// Where a neuron/channel drop sits relative to its convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// After the convolution, i.e. in front of the next BN.
    Traditional,
    /// Between ReLU and the convolution.
    #[default]
    Proposed,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub kind: BlockKind,
    /// Input channels `C`.
    pub channels: usize,
    /// Output channels; defaults to `C`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    /// Path count `P` (bottleneck only).
    #[serde(default = "one")]
    pub paths: usize,
    /// Per-path width `d`; derived as `C / (2P)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_width: Option<usize>,
    /// Drop placement inside residual blocks.
    #[serde(default)]
    pub inner: Placement,
    #[serde(default)]
    pub drops: Vec<DropSpec>,
}

impl BlockConfig {
    pub fn new(kind: BlockKind, channels: usize) -> Self {
        Self {
            kind,
            channels,
            out_channels: None,
            stride: 1,
            kernel: 3,
            paths: 1,
            path_width: None,
            inner: Placement::Proposed,
            drops: Vec::new(),
        }
    }

    pub fn traditional(channels: usize) -> Self {
        Self::new(BlockKind::TraditionalPreact, channels)
    }

    pub fn proposed(channels: usize) -> Self {
        Self::new(BlockKind::ProposedPreact, channels)
    }

    pub fn bottleneck(channels: usize, paths: usize, width: Option<usize>) -> Self {
        Self {
            paths,
            path_width: width,
            ..Self::new(BlockKind::DroppathBottleneck, channels)
        }
    }

    pub fn residual(channels: usize) -> Self {
        Self::new(BlockKind::ResidualDroplayer, channels)
    }

    pub fn with_drop(mut self, spec: DropSpec) -> Self {
        self.drops.push(spec);
        self
    }

    pub fn with_out(mut self, out_channels: usize, stride: usize) -> Self {
        self.out_channels = Some(out_channels);
        self.stride = stride;
        self
    }

    pub fn c_out(&self) -> usize {
        self.out_channels.unwrap_or(self.channels)
    }

    /// Whether input and output shapes agree, allowing an identity shortcut.
    pub fn preserves_shape(&self) -> bool {
        self.c_out() == self.channels && self.stride == 1
    }

    /// `d`, derived as `max(1, C / (2P))` when not set.
    pub fn width(&self) -> Result<usize> {
        match self.path_width {
            Some(0) => Err(config_err!("path width d must be positive")),
            Some(d) => Ok(d),
            None if self.paths == 0 => Err(config_err!("path count P must be positive")),
            None => Ok((self.channels / (2 * self.paths)).max(1)),
        }
    }

    fn drop_of(&self, level: DropLevel) -> Option<&DropSpec> {
        self.drops.iter().find(|d| d.level == level)
    }

    fn unit_drop(&self) -> Option<&DropSpec> {
        self.drops
            .iter()
            .find(|d| matches!(d.level, DropLevel::Neuron | DropLevel::Channel))
    }

    /// Check structural invariants; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.channels == 0 || self.c_out() == 0 {
            return Err(config_err!("{}: channel counts must be positive", self.kind));
        }
        if self.stride == 0 || self.kernel == 0 {
            return Err(config_err!("{}: stride and kernel must be positive", self.kind));
        }
        for (i, d) in self.drops.iter().enumerate() {
            d.validate()?;
            if self.drops[..i].iter().any(|o| o.level == d.level) {
                return Err(config_err!("{}: duplicate {} drop", self.kind, d.level));
            }
        }
        let units = self
            .drops
            .iter()
            .filter(|d| matches!(d.level, DropLevel::Neuron | DropLevel::Channel))
            .count();
        if units > 1 {
            return Err(config_err!("{}: at most one of neuron/channel drop per block", self.kind));
        }
        match self.kind {
            BlockKind::TraditionalPreact | BlockKind::ProposedPreact => {
                if let Some(d) = self.drop_of(DropLevel::Layer) {
                    return Err(config_err!("{}: {} drop needs a residual shortcut", self.kind, d.level));
                }
                if self.drop_of(DropLevel::Path).is_some() {
                    return Err(config_err!("{}: path drop needs a multi-path block", self.kind));
                }
            }
            BlockKind::ResidualDroplayer => {
                if self.drop_of(DropLevel::Path).is_some() {
                    return Err(config_err!("{}: path drop needs a multi-path block", self.kind));
                }
                if self.drop_of(DropLevel::Layer).is_some() && !self.preserves_shape() {
                    return Err(config_err!(
                        "{}: layer drop needs a shape-preserving transform (got {} -> {} channels, stride {})",
                        self.kind,
                        self.channels,
                        self.c_out(),
                        self.stride
                    ));
                }
            }
            BlockKind::DroppathBottleneck => {
                let d = self.width()?;
                if !self.paths.is_power_of_two() {
                    return Err(config_err!("{}: path count {} is not a power of 2", self.kind, self.paths));
                }
                if (self.paths * d) % self.paths != 0 {
                    return Err(config_err!("{}: P does not divide P*d", self.kind));
                }
                if self.drop_of(DropLevel::Layer).is_some() && !self.preserves_shape() {
                    return Err(config_err!("{}: layer drop needs an identity shortcut", self.kind));
                }
                if 9 * d >= 2 * self.channels {
                    warnings.push(format!(
                        "{}: 9*d = {} is not small against 2*C = {}",
                        self.kind,
                        9 * d,
                        2 * self.channels
                    ));
                }
            }
        }
        Ok(warnings)
    }

    /// Convolution weights in the block (bias-free, so this is every conv
    /// scalar). For a shape-preserving bottleneck this is `P*d*(2C + k^2 d)`.
    pub fn count_params(&self) -> Result<usize> {
        self.validate()?;
        let (c, co, k2) = (self.channels, self.c_out(), self.kernel * self.kernel);
        let projection = if self.preserves_shape() { 0 } else { c * co };
        Ok(match self.kind {
            BlockKind::TraditionalPreact | BlockKind::ProposedPreact => c * co * k2,
            BlockKind::ResidualDroplayer => c * co * k2 + co * co * k2 + projection,
            BlockKind::DroppathBottleneck => {
                let (p, d) = (self.paths, self.width()?);
                c * p * d + p * d * d * k2 + p * d * co + projection
            }
        })
    }

    /// Batch-norm affine scalars (`gamma` and `beta`).
    pub fn count_bn_params(&self) -> Result<usize> {
        self.validate()?;
        Ok(2 * match self.kind {
            BlockKind::TraditionalPreact | BlockKind::ProposedPreact => self.channels,
            BlockKind::ResidualDroplayer => self.channels + self.c_out(),
            BlockKind::DroppathBottleneck => self.channels + 2 * self.paths * self.width()?,
        })
    }
}

/// Parameter count of the classic bottleneck with `C/4` inner channels:
/// `C * C/4 * 2 + (C/4)^2 * 9`.
pub fn original_bottleneck_params(c: usize) -> usize {
    let q = c / 4;
    c * q * 2 + q * q * 9
}

/// `d = C / (2P)`, keeping `P * d == C / 2` when `2P` divides `C`.
pub fn derive_width(c: usize, p: usize) -> Result<usize> {
    if p == 0 || c < 2 * p {
        return Err(config_err!("cannot derive a path width for C={c}, P={p}"));
    }
    Ok(c / (2 * p))
}

/// One stage of `L` multi-path layers at spatial size `W x H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageGeometry {
    pub layers: usize,
    pub paths: usize,
    pub width: usize,
    pub w: usize,
    pub h: usize,
}

/// Number of gated components per dropout level for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCensus {
    pub neuron: usize,
    pub channel: usize,
    pub path: usize,
    pub layer: usize,
}

pub fn census(g: StageGeometry) -> Result<ComponentCensus> {
    if g.layers == 0 || g.paths == 0 || g.width == 0 || g.w == 0 || g.h == 0 {
        return Err(config_err!("census needs positive stage dimensions, got {g:?}"));
    }
    Ok(ComponentCensus {
        neuron: g.layers * g.paths * g.width * g.w * g.h,
        channel: g.layers * g.paths * g.width,
        path: g.layers * g.paths,
        layer: g.layers,
    })
}

fn apply_unit_drop<T: Real>(
    spec: Option<&DropSpec>,
    x: Tensor<T>,
    draw: DrawId,
) -> Result<(Tensor<T>, Option<DropMask>)> {
    match spec {
        None => Ok((x, None)),
        Some(s) => {
            let (y, m) = match s.level {
                DropLevel::Neuron => drop_neuron(&x, s, draw, Mode::Train)?,
                _ => drop_channel(&x, s, draw, Mode::Train)?,
            };
            Ok((y, Some(m)))
        }
    }
}

fn mask_grad<T: Real>(mask: &Option<DropMask>, g: Tensor<T>) -> Result<Tensor<T>> {
    match mask {
        Some(m) => m.apply(&g),
        None => Ok(g),
    }
}

fn relu_bn_backward<T: Real>(bn: &mut BatchNorm<T>, act: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let g = relu_backward(act, g)?;
    bn.backward_acc(&g)
}

fn missing_cache() -> Error {
    Error::State("backward called without a cached train-mode forward".into())
}

/// BN -> ReLU -> Conv with an optional neuron/channel drop placed before or
/// after the convolution.
#[derive(Clone, Debug)]
pub struct PreactUnit<T: Real = f64> {
    pub bn: BatchNorm<T>,
    pub conv: Conv2d<T>,
    pub drop: Option<DropSpec>,
    pub placement: Placement,
    pub site: u64,
    cache: Option<UnitCache<T>>,
}

#[derive(Clone, Debug)]
struct UnitCache<T: Real> {
    act: Tensor<T>,
    conv_in: Option<Tensor<T>>,
    mask: Option<DropMask>,
}

impl<T: Real> PreactUnit<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        drop: Option<DropSpec>,
        placement: Placement,
        site: u64,
    ) -> Result<Self> {
        if let Some(d) = &drop {
            if !matches!(d.level, DropLevel::Neuron | DropLevel::Channel) {
                return Err(config_err!("a conv unit only carries neuron or channel drop"));
            }
        }
        Ok(Self {
            bn: BatchNorm::new(c_in)?,
            conv: Conv2d::new(c_in, c_out, kernel, stride, kernel / 2, 1)?,
            drop,
            placement,
            site,
            cache: None,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.conv.output_shape(input)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>, draw: DrawId) -> Result<Tensor<T>> {
        let act = relu_forward(&self.bn.forward_train(x)?);
        let draw = draw.with_layer(self.site);
        let (out, conv_in, mask) = match self.placement {
            Placement::Proposed => {
                let (dropped, mask) = apply_unit_drop(self.drop.as_ref(), act.clone(), draw)?;
                (self.conv.forward(&dropped)?, mask.as_ref().map(|_| dropped), mask)
            }
            Placement::Traditional => {
                let y = self.conv.forward(&act)?;
                let (y, mask) = apply_unit_drop(self.drop.as_ref(), y, draw)?;
                (y, None, mask)
            }
        };
        self.cache = Some(UnitCache { act, conv_in, mask });
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(&relu_forward(&self.bn.forward_eval(x)?))
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(missing_cache)?;
        let g_act = match self.placement {
            Placement::Proposed => {
                let conv_in = cache.conv_in.as_ref().unwrap_or(&cache.act);
                let g = self.conv.backward_acc(conv_in, grad)?;
                mask_grad(&cache.mask, g)?
            }
            Placement::Traditional => {
                let g = mask_grad(&cache.mask, grad.clone())?;
                self.conv.backward_acc(&cache.act, &g)?
            }
        };
        relu_bn_backward(&mut self.bn, &cache.act, &g_act)
    }

    pub fn last_mask(&self) -> Option<&DropMask> {
        self.cache.as_ref().and_then(|c| c.mask.as_ref())
    }

    fn fold(&mut self) -> Result<()> {
        let Some(spec) = self.drop.as_ref().filter(|s| s.scaling == Scaling::EvalWeightRescale) else {
            return Ok(());
        };
        if spec.level == DropLevel::Neuron && spec.unit_rates.is_some() {
            return Err(config_err!("per-neuron rates cannot be folded into shared kernels"));
        }
        match self.placement {
            Placement::Proposed => {
                let keep = keep_probs(spec, self.conv.in_channels())?;
                scale_conv_inputs(&mut self.conv, &keep)
            }
            Placement::Traditional => {
                let keep = keep_probs(spec, self.conv.out_channels())?;
                scale_conv_outputs(&mut self.conv, &keep)
            }
        }
    }

    fn init<R: Rng>(&mut self, rng: &mut R) {
        self.conv.init_he(rng);
    }
}

impl<T: Real> Parameterized<T> for PreactUnit<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.bn.visit_params(&format!("{prefix}bn."), f);
        self.conv.visit_params(&format!("{prefix}conv."), f);
    }
}

/// `conv1x1 (C -> P*d)`, grouped `conv3x3 (P groups)`, gates, `conv1x1 (P*d -> C)`,
/// each convolution pre-activated, plus a shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck<T: Real = f64> {
    pub bn1: BatchNorm<T>,
    pub conv1: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn3: BatchNorm<T>,
    pub conv3: Conv2d<T>,
    /// 1x1 (strided) projection used when the block changes shape.
    pub projection: Option<Conv2d<T>>,
    pub paths: usize,
    pub width: usize,
    pub unit_drop: Option<DropSpec>,
    pub path_drop: Option<DropSpec>,
    pub layer_drop: Option<DropSpec>,
    /// Drop sites: `[unit, path, layer]`.
    pub sites: [u64; 3],
    /// Train forwards in which every path gate came up 0.
    pub all_paths_dropped: u64,
    cache: Option<BottleneckCache<T>>,
}

#[derive(Clone, Debug)]
struct BottleneckCache<T: Real> {
    x: Tensor<T>,
    /// `None` when the layer gate skipped the transform.
    body: Option<BodyCache<T>>,
}

#[derive(Clone, Debug)]
struct BodyCache<T: Real> {
    a1: Tensor<T>,
    a2: Tensor<T>,
    a3: Tensor<T>,
    gated: Tensor<T>,
    unit_mask: Option<DropMask>,
    path_mask: Option<DropMask>,
    layer_scale: f64,
}

impl<T: Real> Bottleneck<T> {
    fn new(cfg: &BlockConfig, site: &mut u64) -> Result<Self> {
        let (c, co, p, d) = (cfg.channels, cfg.c_out(), cfg.paths, cfg.width()?);
        let inner = p * d;
        let mut take = || {
            *site += 1;
            *site - 1
        };
        Ok(Self {
            bn1: BatchNorm::new(c)?,
            conv1: Conv2d::new(c, inner, 1, 1, 0, 1)?,
            bn2: BatchNorm::new(inner)?,
            conv2: Conv2d::new(inner, inner, cfg.kernel, cfg.stride, cfg.kernel / 2, p)?,
            bn3: BatchNorm::new(inner)?,
            conv3: Conv2d::new(inner, co, 1, 1, 0, 1)?,
            projection: if cfg.preserves_shape() {
                None
            } else {
                Some(Conv2d::new(c, co, 1, cfg.stride, 0, 1)?)
            },
            paths: p,
            width: d,
            unit_drop: cfg.unit_drop().cloned(),
            path_drop: cfg.drop_of(DropLevel::Path).cloned(),
            layer_drop: cfg.drop_of(DropLevel::Layer).cloned(),
            sites: [take(), take(), take()],
            all_paths_dropped: 0,
            cache: None,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let s = self.conv1.output_shape(input)?;
        let s = self.conv2.output_shape(s)?;
        self.conv3.output_shape(s)
    }

    fn shortcut(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.projection {
            Some(p) => p.forward(x),
            None => Ok(x.clone()),
        }
    }

    /// Path-gated transform in train mode. `gates` overrides the sampled path
    /// mask (used to evaluate individual mask outcomes).
    pub fn forward_train_with(
        &mut self,
        x: &Tensor<T>,
        draw: DrawId,
        gates: Option<&DropMask>,
    ) -> Result<Tensor<T>> {
        let layer_scale = match &self.layer_drop {
            Some(spec) => {
                if drop_layer_gate(spec, draw.with_layer(self.sites[2]))? {
                    spec.keep_scale(0)
                } else {
                    0.0
                }
            }
            None => 1.0,
        };
        let short = self.shortcut(x)?;
        if layer_scale == 0.0 {
            self.cache = Some(BottleneckCache {
                x: x.clone(),
                body: None,
            });
            return Ok(short);
        }
        let a1 = relu_forward(&self.bn1.forward_train(x)?);
        let a2 = relu_forward(&self.bn2.forward_train(&self.conv1.forward(&a1)?)?);
        let a3 = relu_forward(&self.bn3.forward_train(&self.conv2.forward(&a2)?)?);
        let (dropped, unit_mask) =
            apply_unit_drop(self.unit_drop.as_ref(), a3.clone(), draw.with_layer(self.sites[0]))?;
        let path_mask = match (gates, &self.path_drop) {
            (Some(m), _) => Some(m.clone()),
            (None, Some(spec)) => Some(drop_path_gates(self.paths, spec, draw.with_layer(self.sites[1]))?),
            (None, None) => None,
        };
        let gated = match &path_mask {
            Some(m) => {
                if m.all_dropped() {
                    self.all_paths_dropped += 1;
                }
                m.apply(&dropped)?
            }
            None => dropped,
        };
        let mut f = self.conv3.forward(&gated)?;
        if layer_scale != 1.0 {
            f = f.scale(T::of(layer_scale));
        }
        let out = f.add(&short)?;
        self.cache = Some(BottleneckCache {
            x: x.clone(),
            body: Some(BodyCache {
                a1,
                a2,
                a3,
                gated,
                unit_mask,
                path_mask,
                layer_scale,
            }),
        });
        Ok(out)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let a1 = relu_forward(&self.bn1.forward_eval(x)?);
        let a2 = relu_forward(&self.bn2.forward_eval(&self.conv1.forward(&a1)?)?);
        let a3 = relu_forward(&self.bn3.forward_eval(&self.conv2.forward(&a2)?)?);
        self.conv3.forward(&a3)?.add(&self.shortcut(x)?)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(missing_cache)?;
        let g_short = match &mut self.projection {
            Some(p) => p.backward_acc(&cache.x, grad)?,
            None => grad.clone(),
        };
        let Some(body) = cache.body else {
            return Ok(g_short);
        };
        let g_f = if body.layer_scale != 1.0 {
            grad.scale(T::of(body.layer_scale))
        } else {
            grad.clone()
        };
        let g = self.conv3.backward_acc(&body.gated, &g_f)?;
        let g = mask_grad(&body.path_mask, g)?;
        let g = mask_grad(&body.unit_mask, g)?;
        let g = relu_bn_backward(&mut self.bn3, &body.a3, &g)?;
        let g = self.conv2.backward_acc(&body.a2, &g)?;
        let g = relu_bn_backward(&mut self.bn2, &body.a2, &g)?;
        let g = self.conv1.backward_acc(&body.a1, &g)?;
        let mut gx = relu_bn_backward(&mut self.bn1, &body.a1, &g)?;
        gx.add_assign(&g_short)?;
        Ok(gx)
    }

    pub fn last_masks(&self) -> Vec<&DropMask> {
        self.cache
            .as_ref()
            .and_then(|c| c.body.as_ref())
            .map(|b| b.unit_mask.iter().chain(b.path_mask.iter()).collect())
            .unwrap_or_default()
    }

    /// Layer gate of the last train forward (`None` when no layer drop).
    pub fn last_layer_gate(&self) -> Option<bool> {
        self.layer_drop.as_ref()?;
        self.cache.as_ref().map(|c| c.body.is_some())
    }

    fn fold(&mut self) -> Result<()> {
        let inner = self.paths * self.width;
        if let Some(spec) = self.unit_drop.as_ref().filter(|s| s.scaling == Scaling::EvalWeightRescale) {
            if spec.level == DropLevel::Neuron && spec.unit_rates.is_some() {
                return Err(config_err!("per-neuron rates cannot be folded into shared kernels"));
            }
            scale_conv_inputs(&mut self.conv3, &keep_probs(spec, inner)?)?;
        }
        if let Some(spec) = self.path_drop.as_ref().filter(|s| s.scaling == Scaling::EvalWeightRescale) {
            let keep = keep_probs(spec, self.paths)?;
            let per_channel: Vec<f64> = (0..inner).map(|j| keep[j / self.width]).collect();
            scale_conv_inputs(&mut self.conv3, &per_channel)?;
        }
        if let Some(spec) = self.layer_drop.as_ref().filter(|s| s.scaling == Scaling::EvalWeightRescale) {
            let keep = vec![1.0 - spec.rate_of(0); self.conv3.out_channels()];
            scale_conv_outputs(&mut self.conv3, &keep)?;
        }
        Ok(())
    }

    fn init<R: Rng>(&mut self, rng: &mut R) {
        self.conv1.init_he(rng);
        self.conv2.init_he(rng);
        self.conv3.init_he(rng);
        if let Some(p) = &mut self.projection {
            p.init_he(rng);
        }
    }
}

impl<T: Real> Parameterized<T> for Bottleneck<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.bn1.visit_params(&format!("{prefix}bn1."), f);
        self.conv1.visit_params(&format!("{prefix}conv1."), f);
        self.bn2.visit_params(&format!("{prefix}bn2."), f);
        self.conv2.visit_params(&format!("{prefix}conv2."), f);
        self.bn3.visit_params(&format!("{prefix}bn3."), f);
        self.conv3.visit_params(&format!("{prefix}conv3."), f);
        if let Some(p) = &mut self.projection {
            p.visit_params(&format!("{prefix}proj."), f);
        }
    }
}

/// Two pre-activation conv units on the residual branch with an optional
/// layer gate: `Y = gate * F(X) + X`.
#[derive(Clone, Debug)]
pub struct Residual<T: Real = f64> {
    pub unit1: PreactUnit<T>,
    pub unit2: PreactUnit<T>,
    pub projection: Option<Conv2d<T>>,
    pub layer_drop: Option<DropSpec>,
    pub site: u64,
    cache: Option<ResidualCache<T>>,
}

#[derive(Clone, Debug)]
struct ResidualCache<T: Real> {
    x: Tensor<T>,
    /// `0` when the transform was skipped.
    layer_scale: f64,
}

impl<T: Real> Residual<T> {
    fn new(cfg: &BlockConfig, site: &mut u64) -> Result<Self> {
        let unit = cfg.unit_drop().cloned();
        let (c, co) = (cfg.channels, cfg.c_out());
        let unit1 = PreactUnit::new(c, co, cfg.kernel, cfg.stride, unit.clone(), cfg.inner, *site)?;
        let unit2 = PreactUnit::new(co, co, cfg.kernel, 1, unit, cfg.inner, *site + 1)?;
        *site += 3;
        Ok(Self {
            unit1,
            unit2,
            projection: if cfg.preserves_shape() {
                None
            } else {
                Some(Conv2d::new(c, co, 1, cfg.stride, 0, 1)?)
            },
            layer_drop: cfg.drop_of(DropLevel::Layer).cloned(),
            site: *site - 1,
            cache: None,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.unit2.output_shape(self.unit1.output_shape(input)?)
    }

    fn shortcut(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.projection {
            Some(p) => p.forward(x),
            None => Ok(x.clone()),
        }
    }

    /// Train-mode forward with an explicit layer gate (`None` samples it).
    pub fn forward_train_with(&mut self, x: &Tensor<T>, draw: DrawId, gate: Option<bool>) -> Result<Tensor<T>> {
        let layer_scale = match &self.layer_drop {
            Some(spec) => {
                let open = match gate {
                    Some(g) => g,
                    None => drop_layer_gate(spec, draw.with_layer(self.site))?,
                };
                if open {
                    spec.keep_scale(0)
                } else {
                    0.0
                }
            }
            None => 1.0,
        };
        let short = self.shortcut(x)?;
        self.cache = Some(ResidualCache {
            x: x.clone(),
            layer_scale,
        });
        if layer_scale == 0.0 {
            return Ok(short);
        }
        let mut f = self.unit2.forward_train(&self.unit1.forward_train(x, draw)?, draw)?;
        if layer_scale != 1.0 {
            f = f.scale(T::of(layer_scale));
        }
        f.add(&short)
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.unit2.forward_eval(&self.unit1.forward_eval(x)?)?;
        f.add(&self.shortcut(x)?)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(missing_cache)?;
        let g_short = match &mut self.projection {
            Some(p) => p.backward_acc(&cache.x, grad)?,
            None => grad.clone(),
        };
        if cache.layer_scale == 0.0 {
            return Ok(g_short);
        }
        let g = if cache.layer_scale != 1.0 {
            grad.scale(T::of(cache.layer_scale))
        } else {
            grad.clone()
        };
        let g = self.unit2.backward(&g)?;
        let mut gx = self.unit1.backward(&g)?;
        gx.add_assign(&g_short)?;
        Ok(gx)
    }

    pub fn last_masks(&self) -> Vec<&DropMask> {
        self.unit1.last_mask().into_iter().chain(self.unit2.last_mask()).collect()
    }

    pub fn last_layer_gate(&self) -> Option<bool> {
        self.layer_drop.as_ref()?;
        self.cache.as_ref().map(|c| c.layer_scale != 0.0)
    }

    fn fold(&mut self) -> Result<()> {
        self.unit1.fold()?;
        self.unit2.fold()?;
        if let Some(spec) = self.layer_drop.as_ref().filter(|s| s.scaling == Scaling::EvalWeightRescale) {
            let keep = 1.0 - spec.rate_of(0);
            let n = self.unit2.conv.out_channels();
            scale_conv_outputs(&mut self.unit2.conv, &vec![keep; n])?;
        }
        Ok(())
    }

    fn init<R: Rng>(&mut self, rng: &mut R) {
        self.unit1.init(rng);
        self.unit2.init(rng);
        if let Some(p) = &mut self.projection {
            p.init_he(rng);
        }
    }
}

impl<T: Real> Parameterized<T> for Residual<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.unit1.visit_params(&format!("{prefix}unit1."), f);
        self.unit2.visit_params(&format!("{prefix}unit2."), f);
        if let Some(p) = &mut self.projection {
            p.visit_params(&format!("{prefix}proj."), f);
        }
    }
}

#[derive(Clone, Debug)]
pub enum BlockBody<T: Real = f64> {
    Unit(PreactUnit<T>),
    Bottleneck(Bottleneck<T>),
    Residual(Residual<T>),
}

/// A configured building block and its layers.
#[derive(Clone, Debug)]
pub struct Block<T: Real = f64> {
    pub config: BlockConfig,
    pub body: BlockBody<T>,
}

impl<T: Real> Block<T> {
    /// Construct and He-initialise a block. Drop sites are numbered from
    /// `*next_site`, which is advanced past the ids used; every drop spec's
    /// stream is mixed with `mask_stream`.
    pub fn build<R: Rng>(cfg: &BlockConfig, rng: &mut R, next_site: &mut u64, mask_stream: u64) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        for d in &mut cfg.drops {
            d.seed_stream ^= mask_stream;
        }
        let mut body = match cfg.kind {
            BlockKind::TraditionalPreact | BlockKind::ProposedPreact => {
                let placement = if cfg.kind == BlockKind::TraditionalPreact {
                    Placement::Traditional
                } else {
                    Placement::Proposed
                };
                let unit = PreactUnit::new(
                    cfg.channels,
                    cfg.c_out(),
                    cfg.kernel,
                    cfg.stride,
                    cfg.unit_drop().cloned(),
                    placement,
                    *next_site,
                )?;
                *next_site += 1;
                BlockBody::Unit(unit)
            }
            BlockKind::DroppathBottleneck => BlockBody::Bottleneck(Bottleneck::new(&cfg, next_site)?),
            BlockKind::ResidualDroplayer => BlockBody::Residual(Residual::new(&cfg, next_site)?),
        };
        match &mut body {
            BlockBody::Unit(u) => u.init(rng),
            BlockBody::Bottleneck(b) => b.init(rng),
            BlockBody::Residual(r) => r.init(rng),
        }
        Ok(Self { config: cfg, body })
    }

    /// Standalone block seeded from `seed` with sites starting at 0.
    pub fn from_seed(cfg: &BlockConfig, seed: u64) -> Result<Self> {
        let mut rng = keyed_rng(stream_for(seed, streams::INIT), DrawId::default());
        let mut site = 0;
        Self::build(cfg, &mut rng, &mut site, stream_for(seed, streams::MASK))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match &self.body {
            BlockBody::Unit(u) => u.output_shape(input),
            BlockBody::Bottleneck(b) => b.output_shape(input),
            BlockBody::Residual(r) => r.output_shape(input),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, draw: DrawId) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.forward_train(x, draw),
            Mode::Eval => self.forward_eval(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor<T>, draw: DrawId) -> Result<Tensor<T>> {
        match &mut self.body {
            BlockBody::Unit(u) => u.forward_train(x, draw),
            BlockBody::Bottleneck(b) => b.forward_train_with(x, draw, None),
            BlockBody::Residual(r) => r.forward_train_with(x, draw, None),
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.body {
            BlockBody::Unit(u) => u.forward_eval(x),
            BlockBody::Bottleneck(b) => b.forward_eval(x),
            BlockBody::Residual(r) => r.forward_eval(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match &mut self.body {
            BlockBody::Unit(u) => u.backward(grad),
            BlockBody::Bottleneck(b) => b.backward(grad),
            BlockBody::Residual(r) => r.backward(grad),
        }
    }

    /// Neuron/channel/path masks drawn by the last train forward.
    pub fn last_masks(&self) -> Vec<&DropMask> {
        match &self.body {
            BlockBody::Unit(u) => u.last_mask().into_iter().collect(),
            BlockBody::Bottleneck(b) => b.last_masks(),
            BlockBody::Residual(r) => r.last_masks(),
        }
    }

    pub fn last_layer_gate(&self) -> Option<bool> {
        match &self.body {
            BlockBody::Unit(_) => None,
            BlockBody::Bottleneck(b) => b.last_layer_gate(),
            BlockBody::Residual(r) => r.last_layer_gate(),
        }
    }

    /// Drain the count of all-paths-dropped events.
    pub fn take_all_paths_dropped(&mut self) -> u64 {
        match &mut self.body {
            BlockBody::Bottleneck(b) => std::mem::take(&mut b.all_paths_dropped),
            _ => 0,
        }
    }

    /// Fold `1 - p` into the weights consuming every `eval_weight_rescale`
    /// drop site. Sites with inverted scaling are left alone.
    pub fn fold_rescale(&mut self) -> Result<()> {
        match &mut self.body {
            BlockBody::Unit(u) => u.fold(),
            BlockBody::Bottleneck(b) => b.fold(),
            BlockBody::Residual(r) => r.fold(),
        }
    }

    /// Batch norms in forward order.
    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        match &mut self.body {
            BlockBody::Unit(u) => vec![&mut u.bn],
            BlockBody::Bottleneck(b) => vec![&mut b.bn1, &mut b.bn2, &mut b.bn3],
            BlockBody::Residual(r) => vec![&mut r.unit1.bn, &mut r.unit2.bn],
        }
    }
}

impl<T: Real> Parameterized<T> for Block<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        match &mut self.body {
            BlockBody::Unit(u) => u.visit_params(prefix, f),
            BlockBody::Bottleneck(b) => b.visit_params(prefix, f),
            BlockBody::Residual(r) => r.visit_params(prefix, f),
        }
    }
}
