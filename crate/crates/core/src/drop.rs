//! Structural dropout at four granularities.
//!
//! * neuron: one Bernoulli gate per scalar activation,
//! * channel: one gate per feature map (the whole `h x w` plane),
//! * path: one gate per parallel branch of a multi-path block,
//! * layer: one gate per residual transform, falling back to the shortcut.
//!
//! A gate is 1 with probability `1 - p`. Masks are a pure function of the
//! spec's seed stream and a [`DrawId`], so replaying a draw reproduces the
//! mask exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::Conv2d;
use crate::rng::{keyed_rng, DrawId};
use crate::tensor::{Real, Tensor};
use crate::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropLevel {
    Neuron,
    Channel,
    Path,
    Layer,
}

impl std::fmt::Display for DropLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropLevel::Neuron => "neuron",
            DropLevel::Channel => "channel",
            DropLevel::Path => "path",
            DropLevel::Layer => "layer",
        })
    }
}

/// How the expectation of a gated unit is restored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Survivors are multiplied by `1 / (1 - p)` while training; inference
    /// is the identity.
    #[default]
    InvertedTrainTime,
    /// Survivors pass unscaled; after training the consuming weights are
    /// multiplied by `1 - p` (see [`DropConv::fold`] and
    /// `Network::fold_rescale_into_weights`).
    EvalWeightRescale,
}

/// Dropout configuration for one drop site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropSpec {
    pub level: DropLevel,
    pub rate: f64,
    #[serde(default)]
    pub scaling: Scaling,
    #[serde(default)]
    pub seed_stream: u64,
    /// Optional per-unit rates overriding `rate` (one per gated unit).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_rates: Option<Vec<f64>>,
}

impl DropSpec {
    pub fn new(level: DropLevel, rate: f64) -> Result<Self> {
        let spec = Self {
            level,
            rate,
            scaling: Scaling::default(),
            seed_stream: 0,
            unit_rates: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_scaling(mut self, scaling: Scaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn with_stream(mut self, seed_stream: u64) -> Self {
        self.seed_stream = seed_stream;
        self
    }

    pub fn with_unit_rates(mut self, rates: Vec<f64>) -> Result<Self> {
        self.unit_rates = Some(rates);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        if let Some(rates) = &self.unit_rates {
            rates.iter().try_for_each(|&p| check_rate(p))?;
        }
        Ok(())
    }

    /// Drop probability of unit `k`.
    pub fn rate_of(&self, unit: usize) -> f64 {
        match &self.unit_rates {
            Some(r) => r[unit],
            None => self.rate,
        }
    }

    fn check_units(&self, units: usize) -> Result<()> {
        match &self.unit_rates {
            Some(r) if r.len() != units => Err(config_err!(
                "{} per-unit rates given for {units} {} units",
                r.len(),
                self.level
            )),
            _ => Ok(()),
        }
    }

    /// Multiplier applied to a surviving unit during training.
    pub fn keep_scale(&self, unit: usize) -> f64 {
        match self.scaling {
            Scaling::InvertedTrainTime => 1.0 / (1.0 - self.rate_of(unit)),
            Scaling::EvalWeightRescale => 1.0,
        }
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(config_err!("drop rate {p} outside [0, 1)"));
    }
    Ok(())
}

/// Sampled gates for one draw. Gates are laid out `rows x units`: one row per
/// sample for neuron/channel masks, a single row for path/layer masks.
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    pub level: DropLevel,
    pub rows: usize,
    pub units: usize,
    pub gates: Vec<bool>,
    /// Per-gate multiplier: `0` when dropped, the keep scale otherwise.
    pub factors: Vec<f64>,
    pub draw: DrawId,
}

impl DropMask {
    /// Mask that keeps everything with factor 1 (eval mode / no dropout).
    pub fn identity(level: DropLevel, rows: usize, units: usize) -> Self {
        Self {
            level,
            rows,
            units,
            gates: vec![true; rows * units],
            factors: vec![1.0; rows * units],
            draw: DrawId::default(),
        }
    }

    /// Mask with caller-chosen gates, scaled according to `spec`.
    pub fn from_gates(spec: &DropSpec, rows: usize, units: usize, gates: Vec<bool>) -> Result<Self> {
        if gates.len() != rows * units {
            return Err(shape_err!("{} gates for {rows}x{units} mask", gates.len()));
        }
        spec.validate()?;
        spec.check_units(units)?;
        let factors = gates
            .iter()
            .enumerate()
            .map(|(k, &g)| if g { spec.keep_scale(k % units) } else { 0.0 })
            .collect();
        Ok(Self {
            level: spec.level,
            rows,
            units,
            gates,
            factors,
            draw: DrawId::default(),
        })
    }

    /// Draw `rows * units` independent Bernoulli(1 - p) gates.
    pub fn sample(spec: &DropSpec, rows: usize, units: usize, draw: DrawId) -> Result<Self> {
        spec.validate()?;
        spec.check_units(units)?;
        let mut rng = keyed_rng(spec.seed_stream, draw);
        let mut gates = Vec::with_capacity(rows * units);
        for _ in 0..rows {
            for u in 0..units {
                let p = spec.rate_of(u);
                let keep = rng.gen::<f64>() >= p;
                gates.push(keep);
            }
        }
        let mut m = Self::from_gates(spec, rows, units, gates)?;
        m.draw = draw;
        Ok(m)
    }

    pub fn kept(&self) -> usize {
        self.gates.iter().filter(|&&g| g).count()
    }

    pub fn all_dropped(&self) -> bool {
        !self.gates.iter().any(|&g| g)
    }

    /// Multiply `x` by the scaled mask. Works for forward activations and,
    /// unchanged, for the backward gradient.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let mut out = x.clone();
        match self.level {
            DropLevel::Neuron => {
                if self.rows != s.n || self.units != s.sample() {
                    return Err(shape_err!("neuron mask {}x{} for input {s}", self.rows, self.units));
                }
                for (v, &f) in out.data_mut().iter_mut().zip(&self.factors) {
                    *v *= T::of(f);
                }
            }
            DropLevel::Channel => {
                if self.rows != s.n || self.units != s.c {
                    return Err(shape_err!("channel mask {}x{} for input {s}", self.rows, self.units));
                }
                for i in 0..s.n {
                    for j in 0..s.c {
                        let f = T::of(self.factors[i * s.c + j]);
                        out.plane_mut(i, j).iter_mut().for_each(|v| *v *= f);
                    }
                }
            }
            DropLevel::Path => {
                if self.rows != 1 || self.units == 0 || s.c % self.units != 0 {
                    return Err(shape_err!("path mask of {} gates for input {s}", self.units));
                }
                let width = s.c / self.units;
                for i in 0..s.n {
                    for j in 0..s.c {
                        let f = T::of(self.factors[j / width]);
                        out.plane_mut(i, j).iter_mut().for_each(|v| *v *= f);
                    }
                }
            }
            DropLevel::Layer => {
                if self.factors.len() != 1 {
                    return Err(shape_err!("layer mask must hold a single gate"));
                }
                let f = T::of(self.factors[0]);
                out.data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
        Ok(out)
    }
}

fn gate_tensor<T: Real>(
    x: &Tensor<T>,
    spec: &DropSpec,
    draw: DrawId,
    mode: Mode,
    level: DropLevel,
    units: usize,
) -> Result<(Tensor<T>, DropMask)> {
    spec.validate()?;
    let rows = x.shape().n;
    if mode == Mode::Eval {
        return Ok((x.clone(), DropMask::identity(level, rows, units)));
    }
    let spec = DropSpec {
        level,
        ..spec.clone()
    };
    let mask = DropMask::sample(&spec, rows, units, draw)?;
    Ok((mask.apply(x)?, mask))
}

/// Element-wise dropout: one gate per scalar activation of every sample.
pub fn drop_neuron<T: Real>(x: &Tensor<T>, spec: &DropSpec, draw: DrawId, mode: Mode) -> Result<(Tensor<T>, DropMask)> {
    gate_tensor(x, spec, draw, mode, DropLevel::Neuron, x.shape().sample())
}

/// Channel dropout: one gate per (sample, channel), zeroing whole maps.
pub fn drop_channel<T: Real>(x: &Tensor<T>, spec: &DropSpec, draw: DrawId, mode: Mode) -> Result<(Tensor<T>, DropMask)> {
    gate_tensor(x, spec, draw, mode, DropLevel::Channel, x.shape().c)
}

/// One gate per path, shared across the batch. An all-zero draw is allowed
/// and yields an empty sum of paths.
pub fn drop_path_gates(paths: usize, spec: &DropSpec, draw: DrawId) -> Result<DropMask> {
    if paths == 0 {
        return Err(config_err!("drop-path needs at least one path"));
    }
    let spec = DropSpec {
        level: DropLevel::Path,
        ..spec.clone()
    };
    DropMask::sample(&spec, 1, paths, draw)
}

/// Single gate deciding whether a residual transform participates.
pub fn drop_layer_gate(spec: &DropSpec, draw: DrawId) -> Result<bool> {
    let spec = DropSpec {
        level: DropLevel::Layer,
        ..spec.clone()
    };
    Ok(DropMask::sample(&spec, 1, 1, draw)?.gates[0])
}

/// Scale the kernel slices reading input channel `j` by `factors[j]`.
pub fn scale_conv_inputs<T: Real>(conv: &mut Conv2d<T>, factors: &[f64]) -> Result<()> {
    if factors.len() != conv.in_channels() {
        return Err(shape_err!(
            "{} input factors for conv with {} inputs",
            factors.len(),
            conv.in_channels()
        ));
    }
    let s = conv.weight.shape();
    let cin_g = s.c;
    let cout_g = s.n / conv.groups;
    for o in 0..s.n {
        let grp = o / cout_g;
        for ci in 0..cin_g {
            let f = T::of(factors[grp * cin_g + ci]);
            for ky in 0..s.h {
                for kx in 0..s.w {
                    *conv.weight.at_mut(o, ci, ky, kx) *= f;
                }
            }
        }
    }
    Ok(())
}

/// Scale every kernel producing output channel `i` by `factors[i]`.
pub fn scale_conv_outputs<T: Real>(conv: &mut Conv2d<T>, factors: &[f64]) -> Result<()> {
    let s = conv.weight.shape();
    if factors.len() != s.n {
        return Err(shape_err!("{} output factors for conv with {} outputs", factors.len(), s.n));
    }
    let per = s.sample();
    for (o, chunk) in conv.weight.data_mut().chunks_mut(per).enumerate() {
        let f = T::of(factors[o]);
        chunk.iter_mut().for_each(|w| *w *= f);
    }
    Ok(())
}

/// Keep probabilities `1 - p_u` for `units` gated units.
pub fn keep_probs(spec: &DropSpec, units: usize) -> Result<Vec<f64>> {
    spec.check_units(units)?;
    Ok((0..units).map(|u| 1.0 - spec.rate_of(u)).collect())
}

/// A drop site feeding a convolution: `conv(drop(x))`. The smallest unit on
/// which the ensemble/weight-folding identity can be checked exactly.
#[derive(Clone, Debug)]
pub struct DropConv<T: Real = f64> {
    pub spec: DropSpec,
    pub conv: Conv2d<T>,
    pub folded: bool,
}

impl<T: Real> DropConv<T> {
    pub fn new(spec: DropSpec, conv: Conv2d<T>) -> Result<Self> {
        spec.validate()?;
        if !matches!(spec.level, DropLevel::Neuron | DropLevel::Channel) {
            return Err(config_err!("a conv input can only carry neuron or channel dropout"));
        }
        Ok(Self {
            spec,
            conv,
            folded: false,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, draw: DrawId, mode: Mode) -> Result<(Tensor<T>, DropMask)> {
        let (xd, mask) = match self.spec.level {
            DropLevel::Neuron => drop_neuron(x, &self.spec, draw, mode)?,
            _ => drop_channel(x, &self.spec, draw, mode)?,
        };
        Ok((self.conv.forward(&xd)?, mask))
    }

    /// Multiply each input slice of the kernel by its keep probability so the
    /// deterministic network computes the expectation over masks.
    pub fn fold(&mut self) -> Result<()> {
        if self.folded {
            return Err(Error::State("dropout rescale already folded into weights".into()));
        }
        if self.spec.scaling != Scaling::EvalWeightRescale {
            return Err(config_err!(
                "weight folding requires eval_weight_rescale scaling; inverted scaling is already unbiased"
            ));
        }
        let units = self.conv.in_channels();
        let keep = match (&self.spec.level, &self.spec.unit_rates) {
            (DropLevel::Neuron, Some(_)) => {
                return Err(config_err!("per-neuron rates cannot be folded into shared kernels"))
            }
            _ => keep_probs(&self.spec, units)?,
        };
        scale_conv_inputs(&mut self.conv, &keep)?;
        self.folded = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: (usize, usize, usize, usize), v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn rate_validation() {
        assert!(DropSpec::new(DropLevel::Neuron, 1.0).is_err());
        assert!(DropSpec::new(DropLevel::Neuron, -0.1).is_err());
        assert!(DropSpec::new(DropLevel::Neuron, f64::NAN).is_err());
        assert!(DropSpec::new(DropLevel::Neuron, 0.0).is_ok());
        let bad = DropSpec { rate: 1.0, ..DropSpec::new(DropLevel::Channel, 0.1).unwrap() };
        let x = t((1, 1, 1, 1), &[1.0]);
        assert!(drop_channel(&x, &bad, DrawId::default(), Mode::Train).is_err());
    }

    #[test]
    fn zero_rate_is_identity() {
        let x = t((2, 2, 1, 2), &[1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let spec = DropSpec::new(DropLevel::Neuron, 0.0).unwrap();
        let (y, m) = drop_neuron(&x, &spec, DrawId::new(0, 1, 2), Mode::Train).unwrap();
        assert_eq!(y, x);
        assert!(m.gates.iter().all(|&g| g));
        let (y, _) = drop_channel(&x, &spec, DrawId::new(0, 1, 2), Mode::Train).unwrap();
        assert_eq!(y, x);
        assert_eq!(drop_path_gates(4, &spec, DrawId::default()).unwrap().kept(), 4);
        assert!(drop_layer_gate(&spec, DrawId::default()).unwrap());
    }

    #[test]
    fn forced_neuron_mask() {
        let spec = DropSpec::new(DropLevel::Neuron, 0.5).unwrap();
        let m = DropMask::from_gates(&spec, 1, 2, vec![true, false]).unwrap();
        let y = m.apply(&t((1, 2, 1, 1), &[4.0, 6.0])).unwrap();
        assert_eq!(y.data(), &[8.0, 0.0]);
    }

    #[test]
    fn forced_channel_mask() {
        let spec = DropSpec::new(DropLevel::Channel, 0.5).unwrap();
        let m = DropMask::from_gates(&spec, 1, 2, vec![false, true]).unwrap();
        let y = m.apply(&t((1, 2, 1, 2), &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 6.0, 8.0]);
    }

    #[test]
    fn eval_is_identity() {
        let x = t((1, 2, 1, 2), &[1.0, 2.0, 3.0, 4.0]);
        let spec = DropSpec::new(DropLevel::Channel, 0.9).unwrap();
        for f in [drop_neuron::<f64>, drop_channel::<f64>] {
            let (y, m) = f(&x, &spec, DrawId::new(5, 5, 5), Mode::Eval).unwrap();
            assert_eq!(y, x);
            assert_eq!(m.kept(), m.gates.len());
        }
    }

    #[test]
    fn reproducible_masks() {
        let spec = DropSpec::new(DropLevel::Channel, 0.3).unwrap().with_stream(77);
        let x = Tensor::<f64>::full((8, 16, 2, 2), 1.0).unwrap();
        let d = DrawId::new(2, 40, 7);
        let (a, ma) = drop_channel(&x, &spec, d, Mode::Train).unwrap();
        let (b, mb) = drop_channel(&x, &spec, d, Mode::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (_, mc) = drop_channel(&x, &spec, d.with_layer(8), Mode::Train).unwrap();
        assert_ne!(ma.gates, mc.gates);
    }

    #[test]
    fn drop_frequency_matches_rate() {
        let spec = DropSpec::new(DropLevel::Neuron, 0.3).unwrap();
        let m = DropMask::sample(&spec, 1, 100_000, DrawId::new(1, 2, 3)).unwrap();
        let freq = 1.0 - m.kept() as f64 / 1e5;
        assert!((freq - 0.3).abs() < 0.01, "{freq}");
    }

    #[test]
    fn per_unit_rates() {
        let spec = DropSpec::new(DropLevel::Channel, 0.0)
            .unwrap()
            .with_unit_rates(vec![0.0, 0.5])
            .unwrap();
        let m = DropMask::from_gates(&spec, 1, 2, vec![true, true]).unwrap();
        assert_eq!(m.factors, vec![1.0, 2.0]);
        assert!(DropMask::sample(&spec, 1, 3, DrawId::default()).is_err());
        assert!(spec.clone().with_unit_rates(vec![1.0]).is_err());
    }

    #[test]
    fn path_gates_binomial_mean() {
        let spec = DropSpec::new(DropLevel::Path, 0.1).unwrap();
        let draws = 10_000;
        let total: usize = (0..draws)
            .map(|k| drop_path_gates(32, &spec, DrawId::new(0, k, 0)).unwrap().kept())
            .sum();
        let mean = total as f64 / draws as f64;
        assert!((mean - 28.8).abs() <= 0.5, "{mean}");
    }

    #[test]
    fn all_paths_dropped_gives_zero() {
        let spec = DropSpec::new(DropLevel::Path, 0.5).unwrap();
        let m = DropMask::from_gates(&spec, 1, 4, vec![false; 4]).unwrap();
        assert!(m.all_dropped());
        let y = m.apply(&Tensor::<f64>::full((2, 8, 2, 2), 3.0).unwrap()).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn fold_single_conv() {
        let w = Tensor::full((1, 1, 1, 1), 2.0).unwrap();
        let conv = Conv2d::<f64>::with_weight(w, 1, 0, 1).unwrap();
        let spec = DropSpec::new(DropLevel::Channel, 0.25)
            .unwrap()
            .with_scaling(Scaling::EvalWeightRescale);
        let mut dc = DropConv::new(spec, conv).unwrap();
        dc.fold().unwrap();
        assert_eq!(dc.conv.weight.data(), &[1.5]);
        assert!(matches!(dc.fold(), Err(Error::State(_))));
    }

    #[test]
    fn fold_zero_rate_unchanged() {
        let w = Tensor::from_f64((2, 2, 1, 1), &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let conv = Conv2d::<f64>::with_weight(w.clone(), 1, 0, 1).unwrap();
        let spec = DropSpec::new(DropLevel::Channel, 0.0).unwrap().with_scaling(Scaling::EvalWeightRescale);
        let mut dc = DropConv::new(spec, conv).unwrap();
        dc.fold().unwrap();
        assert_eq!(dc.conv.weight, w);
    }

    #[test]
    fn fold_requires_weight_rescale_mode() {
        let conv = Conv2d::<f64>::new(1, 1, 1, 1, 0, 1).unwrap();
        let spec = DropSpec::new(DropLevel::Channel, 0.25).unwrap();
        assert!(DropConv::new(spec, conv).unwrap().fold().is_err());
    }

    #[test]
    fn grouped_input_scaling() {
        let w = Tensor::full((4, 1, 1, 1), 1.0).unwrap();
        let mut conv = Conv2d::<f64>::with_weight(w, 1, 0, 2).unwrap();
        scale_conv_inputs(&mut conv, &[0.5, 0.25]).unwrap();
        assert_eq!(conv.weight.data(), &[0.5, 0.5, 0.25, 0.25]);
    }
}
