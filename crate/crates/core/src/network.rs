//! Declarative network assembly: stem conv, stages of blocks, and a
//! BN-ReLU-pool-linear head.

use serde::{Deserialize, Serialize};

use crate::blocks::{census, Block, BlockConfig, BlockKind, ComponentCensus, Placement, StageGeometry};
use crate::drop::{DropLevel, DropSpec};
use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::{
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward, BatchNorm, Conv2d, Linear,
    ParamMut, Parameterized,
};
use crate::rng::{keyed_rng, stream_for, streams, DrawId};
use crate::tensor::{Real, Shape, Tensor};
use crate::Mode;

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

fn default_input_channels() -> usize {
    3
}

fn default_input_size() -> usize {
    32
}

fn default_classes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub channels: usize,
    #[serde(default = "three")]
    pub kernel: usize,
}

/// `L` blocks of one kind at width `channels * widen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub kind: BlockKind,
    /// Base channel count `C` (before widening).
    pub channels: usize,
    /// Blocks per stage `L`.
    pub blocks: usize,
    /// Widening factor `k`.
    #[serde(default = "one")]
    pub widen: usize,
    #[serde(default = "one")]
    pub paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_width: Option<usize>,
    #[serde(default)]
    pub inner: Placement,
    /// Stride of the first block; defaults to 1 for the first stage and 2 after.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Stage-level drop override; replaces the network-wide drops when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drops: Option<Vec<DropSpec>>,
}

impl StageSpec {
    pub fn new(kind: BlockKind, channels: usize, blocks: usize) -> Self {
        Self {
            kind,
            channels,
            blocks,
            widen: 1,
            paths: 1,
            path_width: None,
            inner: Placement::Proposed,
            stride: None,
            drops: None,
        }
    }

    pub fn width(&self) -> usize {
        self.channels * self.widen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Square input side length.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<StemSpec>,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Drops applied to every compatible block unless a stage overrides them.
    #[serde(default)]
    pub drops: Vec<DropSpec>,
}

impl NetworkSpec {
    /// Named desk-scale presets: `vgg-micro`, `wrn-micro`, `resnext-micro`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = |stem: usize, stages: Vec<StageSpec>| NetworkSpec {
            input_channels: 3,
            input_size: 32,
            stem: Some(StemSpec { channels: stem, kernel: 3 }),
            stages,
            num_classes: 10,
            drops: Vec::new(),
        };
        match name {
            "vgg-micro" => {
                let stage = |c, stride| StageSpec {
                    stride: Some(stride),
                    ..StageSpec::new(BlockKind::ProposedPreact, c, 1)
                };
                Ok(base(16, vec![stage(16, 1), stage(32, 2), stage(64, 2), stage(64, 1)]))
            }
            "wrn-micro" => {
                // depth 6n + 4 = 10 gives one residual block per stage;
                // base widths 8/16/32 widened by k = 2.
                let stage = |c| StageSpec {
                    widen: 2,
                    ..StageSpec::new(BlockKind::ResidualDroplayer, c, 1)
                };
                Ok(base(16, vec![stage(8), stage(16), stage(32)]))
            }
            "resnext-micro" => {
                let stage = |c, d| StageSpec {
                    paths: 8,
                    path_width: Some(d),
                    ..StageSpec::new(BlockKind::DroppathBottleneck, c, 2)
                };
                Ok(base(32, vec![stage(32, 2), stage(64, 4), stage(128, 8)]))
            }
            other => Err(config_err!(
                "unknown preset {other:?} (expected vgg-micro, wrn-micro or resnext-micro)"
            )),
        }
    }

    /// Channel count entering the first stage.
    fn stem_out(&self) -> usize {
        self.stem.as_ref().map_or(self.input_channels, |s| s.channels)
    }

    /// Block configs in forward order with their stage index.
    pub fn block_configs(&self) -> Result<Vec<(usize, BlockConfig)>> {
        let mut out = Vec::new();
        let mut c_in = self.stem_out();
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.blocks == 0 || stage.width() == 0 {
                return Err(config_err!("stage {si}: blocks and channels must be positive"));
            }
            let drops = stage.drops.as_ref().unwrap_or(&self.drops);
            let stride = stage.stride.unwrap_or(if si == 0 { 1 } else { 2 });
            for bi in 0..stage.blocks {
                let mut cfg = BlockConfig::new(stage.kind, c_in);
                cfg.out_channels = Some(stage.width());
                cfg.stride = if bi == 0 { stride } else { 1 };
                cfg.paths = stage.paths;
                cfg.path_width = stage.path_width;
                cfg.inner = stage.inner;
                cfg.drops = drops.iter().filter(|d| supports(&cfg, d)).cloned().collect();
                cfg.validate().map_err(|e| config_err!("stage {si} block {bi}: {e}"))?;
                out.push((si, cfg));
                c_in = stage.width();
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_size == 0 || self.num_classes == 0 {
            return Err(config_err!("input channels, input size and num_classes must be positive"));
        }
        for d in &self.drops {
            d.validate()?;
        }
        self.block_configs()?;
        Ok(())
    }
}

/// Whether a network-wide drop applies to a block: path drop only in
/// multi-path blocks, layer drop only where an identity shortcut exists.
fn supports(cfg: &BlockConfig, d: &DropSpec) -> bool {
    match d.level {
        DropLevel::Neuron | DropLevel::Channel => true,
        DropLevel::Path => cfg.kind == BlockKind::DroppathBottleneck,
        DropLevel::Layer => {
            matches!(cfg.kind, BlockKind::DroppathBottleneck | BlockKind::ResidualDroplayer) && cfg.preserves_shape()
        }
    }
}

/// One row of the per-block summary printed by `inspect`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSummary {
    pub index: usize,
    pub stage: usize,
    pub kind: BlockKind,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub paths: usize,
    pub width: usize,
    pub conv_params: usize,
    pub bn_params: usize,
    pub output: Shape,
}

/// Serialisable snapshot of a network: its spec, build seed, every
/// trainable tensor and the BN running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub folded: bool,
    pub params: Vec<(String, Vec<f64>)>,
    /// `(running_mean, running_var, updates)` per BN in forward order.
    pub running: Vec<(Vec<f64>, Vec<f64>, u64)>,
}

#[derive(Clone, Debug)]
pub struct Network<T: Real = f64> {
    pub spec: NetworkSpec,
    pub stem: Option<Conv2d<T>>,
    pub blocks: Vec<Block<T>>,
    pub stage_of: Vec<usize>,
    pub head_bn: BatchNorm<T>,
    pub classifier: Linear<T>,
    /// Set once rescale factors have been folded into the weights.
    pub folded: bool,
    /// Build seed; keys initialisation and every drop mask.
    pub seed: u64,
    cache: Option<NetCache<T>>,
}

#[derive(Clone, Debug)]
struct NetCache<T: Real> {
    input: Tensor<T>,
    head_act: Tensor<T>,
    pooled: Tensor<T>,
}

impl<T: Real> Network<T> {
    /// He-initialised network, deterministic in `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = keyed_rng(stream_for(seed, streams::INIT), DrawId::default());
        let mask_stream = stream_for(seed, streams::MASK);
        let stem = match &spec.stem {
            Some(s) => {
                let mut c = Conv2d::new(spec.input_channels, s.channels, s.kernel, 1, s.kernel / 2, 1)?;
                c.init_he(&mut rng);
                Some(c)
            }
            None => None,
        };
        let mut blocks = Vec::new();
        let mut stage_of = Vec::new();
        let mut site = 0;
        for (si, cfg) in spec.block_configs()? {
            blocks.push(Block::build(&cfg, &mut rng, &mut site, mask_stream)?);
            stage_of.push(si);
        }
        let last = spec.stages.last().map_or(spec.stem_out(), |s| s.width());
        let mut classifier = Linear::new(last, spec.num_classes)?;
        classifier.init_he(&mut rng);
        let net = Self {
            spec: spec.clone(),
            stem,
            blocks,
            stage_of,
            head_bn: BatchNorm::new(last)?,
            classifier,
            folded: false,
            seed,
            cache: None,
        };
        net.feature_shapes(Shape::new(1, spec.input_channels, spec.input_size, spec.input_size))?;
        Ok(net)
    }

    /// Output shape after the stem and after each block.
    pub fn feature_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut s = match &self.stem {
            Some(c) => c.output_shape(input)?,
            None => input,
        };
        let mut out = vec![s];
        for b in &self.blocks {
            s = b.output_shape(s)?;
            out.push(s);
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.c != self.spec.input_channels {
            return Err(shape_err!(
                "network expects {} input channels, got {}",
                self.spec.input_channels,
                s
            ));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, draw: DrawId) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => self.forward_train(x, draw),
            Mode::Eval => self.forward_eval(x),
        }
    }

    /// Train forward; masks are keyed by `draw`, so repeating a draw id
    /// repeats every mask.
    pub fn forward_train(&mut self, x: &Tensor<T>, draw: DrawId) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = match &self.stem {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        for b in &mut self.blocks {
            h = b.forward_train(&h, draw)?;
        }
        let head_act = relu_forward(&self.head_bn.forward_train(&h)?);
        let pooled = global_avg_pool_forward(&head_act);
        let logits = self.classifier.forward(&pooled)?;
        self.cache = Some(NetCache {
            input: x.clone(),
            head_act,
            pooled,
        });
        Ok(logits)
    }

    /// Deterministic forward: no masks, no state mutation.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = match &self.stem {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        for b in &self.blocks {
            h = b.forward_eval(&h)?;
        }
        let pooled = global_avg_pool_forward(&relu_forward(&self.head_bn.forward_eval(&h)?));
        self.classifier.forward(&pooled)
    }

    /// Accumulate parameter gradients for the last train forward and return
    /// the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached train-mode forward".into()))?;
        let g = self.classifier.backward_acc(&cache.pooled, grad_logits)?;
        let g = global_avg_pool_backward(cache.head_act.shape(), &g)?;
        let g = relu_backward(&cache.head_act, &g)?;
        let mut g = self.head_bn.backward_acc(&g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        match &mut self.stem {
            Some(c) => c.backward_acc(&cache.input, &g),
            None => Ok(g),
        }
    }

    /// Multiply the weights consuming every rescale-mode drop site by their
    /// keep probabilities, so eval mode realises the ensemble expectation.
    pub fn fold_rescale_into_weights(&mut self) -> Result<()> {
        if self.folded {
            return Err(Error::State("rescale factors already folded into the weights".into()));
        }
        for b in &mut self.blocks {
            b.fold_rescale()?;
        }
        self.folded = true;
        Ok(())
    }

    /// Total all-paths-dropped events since the last call.
    pub fn take_all_paths_dropped(&mut self) -> u64 {
        self.blocks.iter_mut().map(|b| b.take_all_paths_dropped()).sum()
    }

    pub fn block_summaries(&self) -> Result<Vec<BlockSummary>> {
        let input = Shape::new(1, self.spec.input_channels, self.spec.input_size, self.spec.input_size);
        let shapes = self.feature_shapes(input)?;
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let c = &b.config;
                Ok(BlockSummary {
                    index: i,
                    stage: self.stage_of[i],
                    kind: c.kind,
                    c_in: c.channels,
                    c_out: c.c_out(),
                    stride: c.stride,
                    paths: if c.kind == BlockKind::DroppathBottleneck { c.paths } else { 1 },
                    width: if c.kind == BlockKind::DroppathBottleneck { c.width()? } else { c.c_out() },
                    conv_params: c.count_params()?,
                    bn_params: c.count_bn_params()?,
                    output: shapes[i + 1],
                })
            })
            .collect()
    }

    /// Gated-unit geometry of each stage. Plain and residual stages count as
    /// a single path of width `C`.
    pub fn stage_geometries(&self) -> Result<Vec<StageGeometry>> {
        let rows = self.block_summaries()?;
        let mut out: Vec<StageGeometry> = Vec::new();
        for r in rows {
            if out.len() == r.stage {
                out.push(StageGeometry {
                    layers: 0,
                    paths: r.paths,
                    width: r.width,
                    w: r.output.w,
                    h: r.output.h,
                });
            }
            out[r.stage].layers += 1;
        }
        Ok(out)
    }

    pub fn census(&self) -> Result<Vec<ComponentCensus>> {
        self.stage_geometries()?.into_iter().map(census).collect()
    }

    /// Every batch norm in forward order.
    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out: Vec<&mut BatchNorm<T>> = self.blocks.iter_mut().flat_map(|b| b.batch_norms_mut()).collect();
        out.push(&mut self.head_bn);
        out
    }

    /// Copy into another precision, keeping weights, running statistics and
    /// mask streams (cached activations are dropped).
    pub fn cast<U: Real>(&self) -> Result<Network<U>> {
        let mut out = Network::<U>::build(&self.spec, self.seed)?;
        let mut src: Vec<Vec<f64>> = Vec::new();
        self.clone().visit_params("", &mut |p| src.push(p.value.iter().map(|v| v.f64()).collect()));
        let mut it = src.into_iter();
        out.visit_params("", &mut |p| {
            let v = it.next().expect("identical structure");
            for (d, s) in p.value.iter_mut().zip(v) {
                *d = U::of(s);
            }
        });
        let mut this = self.clone();
        for (d, s) in out.batch_norms_mut().into_iter().zip(this.batch_norms_mut()) {
            d.running_mean = s.running_mean.iter().map(|v| U::of(v.f64())).collect();
            d.running_var = s.running_var.iter().map(|v| U::of(v.f64())).collect();
            d.updates = s.updates;
        }
        out.folded = self.folded;
        Ok(out)
    }
}

impl<T: Real> Network<T> {
    pub fn export_state(&self) -> NetworkState {
        let mut this = self.clone();
        let mut params = Vec::new();
        this.visit_params("", &mut |p| params.push((p.name.to_string(), p.value.iter().map(|v| v.f64()).collect())));
        let running = this
            .batch_norms_mut()
            .into_iter()
            .map(|bn| {
                (
                    bn.running_mean.iter().map(|v| v.f64()).collect(),
                    bn.running_var.iter().map(|v| v.f64()).collect(),
                    bn.updates,
                )
            })
            .collect();
        NetworkState {
            spec: self.spec.clone(),
            seed: self.seed,
            folded: self.folded,
            params,
            running,
        }
    }

    /// Rebuild a network from a snapshot, checking every tensor name and size.
    pub fn from_state(state: &NetworkState) -> Result<Self> {
        let mut net = Self::build(&state.spec, state.seed)?;
        let mut idx = 0;
        let mut err = None;
        net.visit_params("", &mut |p| {
            match state.params.get(idx) {
                Some((name, v)) if name == p.name && v.len() == p.value.len() => {
                    for (d, s) in p.value.iter_mut().zip(v) {
                        *d = T::of(*s);
                    }
                }
                other => {
                    err.get_or_insert_with(|| {
                        Error::Format(format!(
                            "checkpoint tensor {idx}: expected {} [{}], found {:?}",
                            p.name,
                            p.value.len(),
                            other.map(|(n, v)| (n.as_str(), v.len()))
                        ))
                    });
                }
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != state.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, network has {idx}",
                state.params.len()
            )));
        }
        let bns = net.batch_norms_mut();
        if bns.len() != state.running.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} batch norms, network has {}",
                state.running.len(),
                bns.len()
            )));
        }
        for (bn, (m, v, u)) in bns.into_iter().zip(&state.running) {
            if m.len() != bn.channels() || v.len() != bn.channels() {
                return Err(Error::Format("checkpoint running statistics have the wrong width".into()));
            }
            bn.running_mean = m.iter().map(|&x| T::of(x)).collect();
            bn.running_var = v.iter().map(|&x| T::of(x)).collect();
            bn.updates = *u;
        }
        if state.folded {
            // Weights were exported after folding; only the flag is restored.
            net.folded = true;
        }
        Ok(net)
    }
}

impl<T: Real> Parameterized<T> for Network<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        if let Some(c) = &mut self.stem {
            c.visit_params(&format!("{prefix}stem."), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&format!("{prefix}block{i}."), f);
        }
        self.head_bn.visit_params(&format!("{prefix}head_bn."), f);
        self.classifier.visit_params(&format!("{prefix}fc."), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    fn randn(s: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = keyed_rng(seed, DrawId::default());
        Tensor::from_vec(s, (0..s.numel()).map(|_| standard_normal(&mut rng)).collect()).unwrap()
    }

    fn params(net: &mut Network<f64>) -> Vec<f64> {
        let mut v = Vec::new();
        net.visit_params("", &mut |p| v.extend_from_slice(p.value));
        v
    }

    #[test]
    fn presets_build_and_reach_expected_geometry() {
        for name in ["vgg-micro", "wrn-micro", "resnext-micro"] {
            let spec = NetworkSpec::preset(name).unwrap();
            let net = Network::<f64>::build(&spec, 1).unwrap();
            let shapes = net.feature_shapes(Shape::new(1, 3, 32, 32)).unwrap();
            assert_eq!(shapes.last().unwrap().h, 8, "{name}");
        }
        assert!(NetworkSpec::preset("alexnet").is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let spec = NetworkSpec::preset("wrn-micro").unwrap();
        let mut a = Network::<f64>::build(&spec, 7).unwrap();
        let mut b = Network::<f64>::build(&spec, 7).unwrap();
        let mut c = Network::<f64>::build(&spec, 8).unwrap();
        assert_eq!(params(&mut a), params(&mut b));
        assert_ne!(params(&mut a), params(&mut c));
    }

    #[test]
    fn classifier_shape_and_single_image() {
        let spec = NetworkSpec::preset("wrn-micro").unwrap();
        let mut net = Network::<f64>::build(&spec, 1).unwrap();
        assert_eq!(net.classifier.weight.len(), 10 * 64);
        let x = randn(Shape::new(1, 3, 32, 32), 2);
        let y = net.forward_train(&x, DrawId::default()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 10, 1, 1));
    }

    #[test]
    fn single_pointwise_conv_has_one_param() {
        let spec = NetworkSpec {
            input_channels: 1,
            input_size: 4,
            stem: Some(StemSpec { channels: 1, kernel: 1 }),
            stages: vec![],
            num_classes: 1,
            drops: vec![],
        };
        let mut net = Network::<f64>::build(&spec, 0).unwrap();
        let mut stem_count = 0;
        net.stem.as_mut().unwrap().visit_params("", &mut |p| stem_count += p.value.len());
        assert_eq!(stem_count, 1);
    }

    #[test]
    fn num_trainable_is_sum_of_block_counts_and_fold_keeps_it() {
        let mut spec = NetworkSpec::preset("resnext-micro").unwrap();
        spec.drops = vec![DropSpec::new(DropLevel::Path, 0.25)
            .unwrap()
            .with_scaling(crate::drop::Scaling::EvalWeightRescale)];
        let mut net = Network::<f64>::build(&spec, 3).unwrap();
        let blocks: usize = net
            .blocks
            .iter()
            .map(|b| b.config.count_params().unwrap() + b.config.count_bn_params().unwrap())
            .sum();
        let stem = net.stem.as_ref().unwrap().num_params();
        let head = net.head_bn.num_params() + net.classifier.num_params();
        assert_eq!(net.num_trainable(), blocks + stem + head);
        let before = net.num_trainable();
        net.fold_rescale_into_weights().unwrap();
        assert_eq!(net.num_trainable(), before);
        assert!(net.fold_rescale_into_weights().is_err());
    }

    #[test]
    fn eval_is_pure_and_does_not_perturb_training() {
        let mut spec = NetworkSpec::preset("wrn-micro").unwrap();
        spec.input_size = 8;
        spec.drops = vec![DropSpec::new(DropLevel::Channel, 0.2).unwrap()];
        let x = randn(Shape::new(4, 3, 8, 8), 3);
        let mut a = Network::<f64>::build(&spec, 1).unwrap();
        let mut b = a.clone();
        a.forward_train(&x, DrawId::new(0, 0, 0)).unwrap();
        b.forward_train(&x, DrawId::new(0, 0, 0)).unwrap();
        let e1 = b.forward_eval(&x).unwrap();
        let e2 = b.forward_eval(&x).unwrap();
        assert_eq!(e1, e2);
        let ya = a.forward_train(&x, DrawId::new(0, 1, 0)).unwrap();
        let yb = b.forward_train(&x, DrawId::new(0, 1, 0)).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn zero_rate_train_matches_eval_on_constant_stream() {
        let mut spec = NetworkSpec::preset("vgg-micro").unwrap();
        spec.input_size = 8;
        spec.drops = vec![DropSpec::new(DropLevel::Channel, 0.0).unwrap()];
        let mut net = Network::<f64>::build(&spec, 4).unwrap();
        let x = randn(Shape::new(8, 3, 8, 8), 5);
        let mut train = net.forward_train(&x, DrawId::default()).unwrap();
        for step in 1..300 {
            train = net.forward_train(&x, DrawId::new(0, step, 0)).unwrap();
        }
        let eval = net.forward_eval(&x).unwrap();
        assert!(train.max_abs_diff(&eval).unwrap() < 1e-5);
    }

    #[test]
    fn wrong_input_channels_is_shape_error() {
        let net = Network::<f64>::build(&NetworkSpec::preset("vgg-micro").unwrap(), 0).unwrap();
        assert!(matches!(
            net.forward_eval(&Tensor::zeros((1, 1, 32, 32)).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn census_monotone_for_resnext() {
        let net = Network::<f64>::build(&NetworkSpec::preset("resnext-micro").unwrap(), 0).unwrap();
        for c in net.census().unwrap() {
            assert!(c.neuron > c.channel && c.channel > c.path && c.path > c.layer);
        }
    }

    #[test]
    fn state_round_trip() {
        let mut spec = NetworkSpec::preset("resnext-micro").unwrap();
        spec.input_size = 8;
        let mut net = Network::<f64>::build(&spec, 5).unwrap();
        let x = randn(Shape::new(2, 3, 8, 8), 1);
        net.forward_train(&x, DrawId::default()).unwrap();
        let state = net.export_state();
        let back = Network::<f64>::from_state(&state).unwrap();
        assert_eq!(back.forward_eval(&x).unwrap(), net.forward_eval(&x).unwrap());
        let mut bad = state.clone();
        bad.params.pop();
        assert!(Network::<f64>::from_state(&bad).is_err());
    }

    #[test]
    fn empty_network_has_no_blocks() {
        let spec = NetworkSpec {
            stem: None,
            stages: vec![],
            ..NetworkSpec::preset("vgg-micro").unwrap()
        };
        let net = Network::<f64>::build(&spec, 0).unwrap();
        assert!(net.block_summaries().unwrap().is_empty());
        assert!(net.census().unwrap().is_empty());
    }
}
