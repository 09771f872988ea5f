//! Numerical evidence for the engine's claims: finite-difference gradient
//! checks, the BN-input variance probe, Monte-Carlo ensemble/fold
//! equivalence and drop-path expectation tests.
//!
//! Monte-Carlo reports state their own error bars: a deviation passes when
//! every element lies within `4` standard errors of its target.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockBody, BlockConfig, Placement, PreactUnit};
use crate::drop::{keep_probs, scale_conv_inputs, DropLevel, DropMask, DropSpec, Scaling};
use crate::error::{config_err, Result};
use crate::layers::{
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward, BatchNorm, Conv2d, Linear,
    MaxPool, ParamMut, Parameterized,
};
use crate::network::{Network, NetworkSpec};
use crate::rng::{keyed_rng, standard_normal, stream_for, streams, DrawId};
use crate::tensor::{Real, Shape, Tensor};

/// Standard errors allowed between a Monte-Carlo mean and its target.
pub const CLT_SIGMAS: f64 = 4.0;

/// One measured quantity; `bound`/`pass` are absent for informational rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetric {
    pub name: String,
    pub value: f64,
    pub bound: Option<f64>,
    pub pass: Option<bool>,
}

impl ProbeMetric {
    /// Passes when `value <= bound`.
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: Some(bound),
            pass: Some(value <= bound),
        }
    }

    /// Passes when `value > bound` (used where a violation is the expected outcome).
    pub fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: Some(bound),
            pass: Some(value > bound),
        }
    }

    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: None,
            pass: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub metrics: Vec<ProbeMetric>,
    pub notes: Vec<String>,
}

impl ProbeReport {
    pub fn new(probe: impl Into<String>) -> Self {
        Self {
            probe: probe.into(),
            metrics: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn pass(&self) -> bool {
        self.metrics.iter().all(|m| m.pass != Some(false))
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    pub const CSV_HEADER: &'static str = "probe,metric,value,bound,pass";

    /// Rows `probe,metric,value,bound,pass` without the header.
    pub fn csv_rows(&self) -> String {
        self.metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{},{},{},{}\n",
                    self.probe,
                    m.name,
                    m.value,
                    m.bound.map(|b| b.to_string()).unwrap_or_default(),
                    m.pass.map(|p| p.to_string()).unwrap_or_default()
                )
            })
            .collect()
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "probe {}: {}", self.probe, if self.pass() { "PASS" } else { "FAIL" })?;
        for m in &self.metrics {
            match (m.bound, m.pass) {
                (Some(b), Some(p)) => writeln!(
                    f,
                    "  {:<28} {:>14.6e}  bound {:>12.6e}  {}",
                    m.name,
                    m.value,
                    b,
                    if p { "ok" } else { "FAIL" }
                )?,
                _ => writeln!(f, "  {:<28} {:>14.6e}", m.name, m.value)?,
            }
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// A unit with a train-mode forward whose randomness is frozen between calls,
/// and a matching backward that accumulates parameter gradients.
pub trait Differentiable<T: Real>: Parameterized<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Layer plus the input of its last forward.
#[derive(Clone, Debug)]
pub struct WithInput<L, T: Real> {
    pub layer: L,
    input: Option<Tensor<T>>,
}

impl<L, T: Real> WithInput<L, T> {
    pub fn new(layer: L) -> Self {
        Self { layer, input: None }
    }

    fn input(&self) -> Result<&Tensor<T>> {
        self.input
            .as_ref()
            .ok_or_else(|| crate::Error::State("backward before forward".into()))
    }
}

impl<L: Parameterized<T>, T: Real> Parameterized<T> for WithInput<L, T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.layer.visit_params(prefix, f);
    }
}

impl<T: Real> Differentiable<T> for WithInput<Conv2d<T>, T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        self.layer.forward(x)
    }
    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input()?.clone();
        self.layer.backward_acc(&x, g)
    }
}

impl<T: Real> Differentiable<T> for WithInput<Linear<T>, T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        self.layer.forward(x)
    }
    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input()?.clone();
        self.layer.backward_acc(&x, g)
    }
}

impl<T: Real> Differentiable<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_train(x)
    }
    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_acc(g)
    }
}

/// Parameter-free layers.
#[derive(Clone, Debug)]
pub enum Stateless {
    Relu,
    GlobalAvgPool,
    MaxPool(MaxPool),
    /// A fixed drop mask.
    Mask(DropMask),
}

/// A parameter-free layer with its cached forward state.
#[derive(Clone, Debug)]
pub struct StatelessUnit<T: Real> {
    pub op: Stateless,
    input: Option<Tensor<T>>,
    argmax: Vec<usize>,
}

impl<T: Real> StatelessUnit<T> {
    pub fn new(op: Stateless) -> Self {
        Self {
            op,
            input: None,
            argmax: Vec::new(),
        }
    }
}

impl<T: Real> Parameterized<T> for StatelessUnit<T> {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(ParamMut<'_, T>)) {}
}

impl<T: Real> Differentiable<T> for StatelessUnit<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input = Some(x.clone());
        match &self.op {
            Stateless::Relu => Ok(relu_forward(x)),
            Stateless::GlobalAvgPool => Ok(global_avg_pool_forward(x)),
            Stateless::MaxPool(p) => {
                let (y, arg) = p.forward(x)?;
                self.argmax = arg;
                Ok(y)
            }
            Stateless::Mask(m) => m.apply(x),
        }
    }
    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .input
            .as_ref()
            .ok_or_else(|| crate::Error::State("backward before forward".into()))?;
        match &self.op {
            Stateless::Relu => relu_backward(x, g),
            Stateless::GlobalAvgPool => global_avg_pool_backward(x.shape(), g),
            Stateless::MaxPool(p) => p.backward(x.shape(), &self.argmax, g),
            Stateless::Mask(m) => m.apply(g),
        }
    }
}

/// A block or network whose masks are frozen by reusing one draw id.
#[derive(Clone, Debug)]
pub struct Frozen<U> {
    pub unit: U,
    pub draw: DrawId,
}

impl<U: Parameterized<T>, T: Real> Parameterized<T> for Frozen<U> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.unit.visit_params(prefix, f);
    }
}

impl<T: Real> Differentiable<T> for Frozen<Block<T>> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unit.forward_train(x, self.draw)
    }
    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        self.unit.backward(g)
    }
}

impl<T: Real> Differentiable<T> for Frozen<Network<T>> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unit.forward_train(x, self.draw)
    }
    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        self.unit.backward(g)
    }
}

/// Wraps a unit and adds `offset` to the first parameter gradient after
/// every backward: a deliberately broken unit for testing the checker.
#[derive(Clone, Debug)]
pub struct FaultInjected<U> {
    pub unit: U,
    pub offset: f64,
}

impl<U: Parameterized<T>, T: Real> Parameterized<T> for FaultInjected<U> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_, T>)) {
        self.unit.visit_params(prefix, f);
    }
}

impl<U: Differentiable<T>, T: Real> Differentiable<T> for FaultInjected<U> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unit.forward(x)
    }
    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let gx = self.unit.backward(g)?;
        let mut first = true;
        let off = self.offset;
        self.unit.visit_params("", &mut |p| {
            if first && !p.grad.is_empty() {
                p.grad[0] += T::of(off);
                first = false;
            }
        });
        Ok(gx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Entries checked per tensor (evenly spaced); `usize::MAX` checks all.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            max_per_tensor: 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradEntry>,
    /// First non-finite gradient, if any.
    pub failure: Option<String>,
    /// Differences re-taken at a smaller step because the first straddled a
    /// ReLU kink or max-pool switch.
    pub kink_retries: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.failure.is_none() && self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }

    pub fn to_probe(&self, name: &str) -> ProbeReport {
        let mut r = ProbeReport::new(name);
        for e in &self.entries {
            r.metrics
                .push(ProbeMetric::at_most(format!("{}.max_rel_err", e.name), e.max_rel_err, self.tol));
        }
        if let Some(f) = &self.failure {
            r.metrics.push(ProbeMetric::at_most("non_finite", 1.0, 0.0));
            r.notes.push(f.clone());
        }
        r.metrics.push(ProbeMetric::info("kink_retries", self.kink_retries as f64));
        r
    }
}

fn projection(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = keyed_rng(stream_for(seed, streams::PROBE), DrawId::new(0, 0, 1));
    let scale = 1.0 / (shape.numel() as f64).sqrt();
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| scale * standard_normal(&mut rng)).collect())
        .expect("shape is valid")
}

fn objective<T: Real>(out: &Tensor<T>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(o, r)| o.f64() * r).sum()
}

fn sample_indices(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..cap).map(|k| k * (len - 1) / (cap - 1).max(1)).collect();
    v.dedup();
    v
}

fn param_grads<T: Real, U: Parameterized<T>>(unit: &mut U) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    unit.visit_params("", &mut |p| {
        out.push((p.name.to_string(), p.grad.iter().map(|g| g.f64()).collect()))
    });
    out
}

fn nudge<U: Parameterized<f64>>(unit: &mut U, tensor: usize, index: usize, delta: f64) {
    let mut t = 0;
    unit.visit_params("", &mut |p| {
        if t == tensor {
            p.value[index] += delta;
        }
        t += 1;
    });
}

fn set_param<U: Parameterized<f64>>(unit: &mut U, tensor: usize, index: usize, value: f64) {
    let mut t = 0;
    unit.visit_params("", &mut |p| {
        if t == tensor {
            p.value[index] = value;
        }
        t += 1;
    });
}

fn get_param<U: Parameterized<f64>>(unit: &mut U, tensor: usize, index: usize) -> f64 {
    let mut t = 0;
    let mut v = 0.0;
    unit.visit_params("", &mut |p| {
        if t == tensor {
            v = p.value[index];
        }
        t += 1;
    });
    v
}

/// Central difference with a kink fallback: if the estimate disagrees with
/// the analytic value, smaller steps are tried and the closest is kept.
fn central_difference(
    mut eval: impl FnMut(f64) -> Result<f64>,
    analytic: f64,
    opts: &GradCheckOptions,
    tol: f64,
    retries: &mut usize,
) -> Result<f64> {
    let fd = |eval: &mut dyn FnMut(f64) -> Result<f64>, h: f64| -> Result<f64> {
        Ok((eval(h)? - eval(-h)?) / (2.0 * h))
    };
    let rel = |n: f64| (analytic - n).abs() / analytic.abs().max(n.abs()).max(opts.floor);
    let mut best = fd(&mut eval, opts.step)?;
    if rel(best) > tol {
        *retries += 1;
        for h in [opts.step * 0.1, opts.step * 0.01] {
            let n = fd(&mut eval, h)?;
            if rel(n) < rel(best) {
                best = n;
            }
        }
    }
    Ok(best)
}

/// Compare analytic parameter and input gradients of `unit` at `x`
/// against central finite differences of `L = sum(out * r)`.
pub fn grad_check<U: Differentiable<f64>>(
    unit: &mut U,
    x: &Tensor<f64>,
    tol: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let out = unit.forward(x)?;
    let r = projection(out.shape(), opts.seed);
    unit.zero_grad();
    let gx = unit.backward(&r.cast())?;
    let analytic_params = param_grads(unit);
    check_against(unit, x, &gx.cast(), analytic_params, &r, tol, opts, |u, x| u.forward(x))
}

/// Single-precision check: analytic gradients of `net32` against finite
/// differences of the same network in double precision.
pub fn grad_check_single(
    net32: &Network<f32>,
    x: &Tensor<f32>,
    draw: DrawId,
    tol: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut unit32 = Frozen {
        unit: net32.clone(),
        draw,
    };
    let out = Differentiable::forward(&mut unit32, x)?;
    let r = projection(out.shape(), opts.seed);
    unit32.zero_grad();
    let gx = Differentiable::backward(&mut unit32, &r.cast())?;
    let analytic = param_grads(&mut unit32);
    let mut unit64 = Frozen {
        unit: net32.cast::<f64>()?,
        draw,
    };
    check_against(&mut unit64, &x.cast(), &gx.cast(), analytic, &r, tol, opts, |u, x| {
        Differentiable::forward(u, x)
    })
}

#[allow(clippy::too_many_arguments)]
fn check_against<U: Parameterized<f64>>(
    unit: &mut U,
    x: &Tensor<f64>,
    gx: &Tensor<f64>,
    analytic_params: Vec<(String, Vec<f64>)>,
    r: &Tensor<f64>,
    tol: f64,
    opts: &GradCheckOptions,
    mut forward: impl FnMut(&mut U, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        tol,
        entries: Vec::new(),
        failure: None,
        kink_retries: 0,
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
    for (t, (name, grads)) in analytic_params.iter().enumerate() {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            report.failure = Some(format!("non-finite gradient at {name}[{i}]"));
            return Ok(report);
        }
        let mut entry = GradEntry {
            name: name.clone(),
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for i in sample_indices(grads.len(), opts.max_per_tensor) {
            let orig = get_param(unit, t, i);
            let n = central_difference(
                |h| {
                    nudge(unit, t, i, h);
                    let l = objective(&forward(unit, x)?, r);
                    set_param(unit, t, i, orig);
                    Ok(l)
                },
                grads[i],
                opts,
                tol,
                &mut report.kink_retries,
            )?;
            let e = rel(grads[i], n);
            entry.checked += 1;
            if !(e <= entry.max_rel_err) {
                entry.max_rel_err = e;
                entry.worst_index = i;
            }
        }
        report.entries.push(entry);
    }
    if let Some(i) = gx.data().iter().position(|g| !g.is_finite()) {
        report.failure = Some(format!("non-finite input gradient at index {i}"));
        return Ok(report);
    }
    let mut entry = GradEntry {
        name: "input".into(),
        checked: 0,
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for i in sample_indices(x.len(), opts.max_per_tensor) {
        let n = central_difference(
            |h| {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                Ok(objective(&forward(unit, &xp)?, r))
            },
            gx.data()[i],
            opts,
            tol,
            &mut report.kink_retries,
        )?;
        let e = rel(gx.data()[i], n);
        entry.checked += 1;
        if !(e <= entry.max_rel_err) {
            entry.max_rel_err = e;
            entry.worst_index = i;
        }
    }
    report.entries.push(entry);
    Ok(report)
}

// ---------------------------------------------------------------------------
// BN-input variance probe
// ---------------------------------------------------------------------------

/// Train/eval moments of a BN input tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProbe {
    pub layer: String,
    pub train_mean: Vec<f64>,
    pub train_var: Vec<f64>,
    pub eval_mean: Vec<f64>,
    pub eval_var: Vec<f64>,
    /// `train_var / eval_var` per channel.
    pub ratio: Vec<f64>,
}

impl MomentProbe {
    pub fn mean_ratio(&self) -> f64 {
        self.ratio.iter().sum::<f64>() / self.ratio.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnProbeConfig {
    pub placement: Placement,
    pub p: f64,
    pub batches: usize,
    pub batch: usize,
    /// Spatial side; `side * side` positions per channel.
    pub side: usize,
    pub channels: usize,
    /// Train forwards used to settle the running statistics first.
    pub warmup: usize,
    pub seed: u64,
}

impl BnProbeConfig {
    pub fn new(placement: Placement, p: f64) -> Self {
        Self {
            placement,
            p,
            batches: 20,
            batch: 256,
            side: 8,
            channels: 16,
            warmup: 20,
            seed: 0,
        }
    }
}

/// Result of the variance probe: the moments of the BN input the placement
/// claim is about, plus those of the block output feeding the next BN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnProbeResult {
    /// BN input perturbed (or not) by this block's mask.
    pub bn_input: MomentProbe,
    /// The block output entering the downstream BN.
    pub downstream: MomentProbe,
}

struct MomentAcc {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl MomentAcc {
    fn new(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![0.0; c],
        }
    }
    fn add(&mut self, x: &Tensor<f64>) {
        let (m, v) = x.moments();
        for c in 0..m.len() {
            self.mean[c] += m[c];
            self.var[c] += v[c];
        }
    }
    fn finish(mut self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let k = k.max(1) as f64;
        self.mean.iter_mut().for_each(|v| *v /= k);
        self.var.iter_mut().for_each(|v| *v /= k);
        (self.mean, self.var)
    }
}

fn moment_probe(layer: &str, train: MomentAcc, eval: MomentAcc, k: usize) -> MomentProbe {
    let (tm, tv) = train.finish(k);
    let (em, ev) = eval.finish(k);
    let ratio = tv.iter().zip(&ev).map(|(t, e)| t / e).collect();
    MomentProbe {
        layer: layer.into(),
        train_mean: tm,
        train_var: tv,
        eval_mean: em,
        eval_var: ev,
        ratio,
    }
}

/// Run a BN -> ReLU -> Conv unit with a channel drop placed before or after
/// the conv on i.i.d. N(0, 1) inputs and compare train/eval variances.
///
/// Kernels are centred (each output filter sums to zero) so the conv output
/// has zero mean; a Bernoulli gate with inverted scaling then inflates the
/// variance by exactly `1 / (1 - p)`.
pub fn bn_variance_probe(cfg: &BnProbeConfig) -> Result<BnProbeResult> {
    if cfg.batches == 0 || cfg.batch == 0 || cfg.side == 0 || cfg.channels == 0 {
        return Err(config_err!("bn probe needs positive batches, batch, side and channels"));
    }
    let c = cfg.channels;
    let spec = DropSpec::new(DropLevel::Channel, cfg.p)?.with_stream(stream_for(cfg.seed, streams::MASK));
    let mut unit = PreactUnit::<f64>::new(c, c, 3, 1, Some(spec), cfg.placement, 0)?;
    let mut rng = keyed_rng(stream_for(cfg.seed, streams::INIT), DrawId::default());
    unit.conv.init_he(&mut rng);
    centre_kernels(&mut unit.conv);
    let stream = stream_for(cfg.seed, streams::PROBE);
    let input = |b: usize| -> Result<Tensor<f64>> {
        let mut rng = keyed_rng(stream, DrawId::new(0, b as u64, 0));
        let s = Shape::new(cfg.batch, c, cfg.side, cfg.side);
        Tensor::from_vec(s, (0..s.numel()).map(|_| standard_normal(&mut rng)).collect())
    };
    for b in 0..cfg.warmup {
        unit.forward_train(&input(b)?, DrawId::new(0, b as u64, 0))?;
    }
    let (mut own_t, mut own_e) = (MomentAcc::new(c), MomentAcc::new(c));
    let (mut down_t, mut down_e) = (MomentAcc::new(c), MomentAcc::new(c));
    for b in cfg.warmup..cfg.warmup + cfg.batches {
        let x = input(b)?;
        // Traditional placement gates the block output, which is the next
        // BN's input; the proposed placement gates after its BN, whose input
        // is then the unmasked x in both modes.
        let train_out = unit.forward_train(&x, DrawId::new(0, b as u64, 0))?;
        let eval_out = unit.forward_eval(&x)?;
        down_t.add(&train_out);
        down_e.add(&eval_out);
        match cfg.placement {
            Placement::Traditional => {
                own_t.add(&train_out);
                own_e.add(&eval_out);
            }
            Placement::Proposed => {
                own_t.add(&x);
                own_e.add(&x);
            }
        }
    }
    Ok(BnProbeResult {
        bn_input: moment_probe("bn_input", own_t, own_e, cfg.batches),
        downstream: moment_probe("downstream", down_t, down_e, cfg.batches),
    })
}

fn centre_kernels(conv: &mut Conv2d<f64>) {
    let per = conv.weight.shape().sample();
    for chunk in conv.weight.data_mut().chunks_exact_mut(per) {
        let m = chunk.iter().sum::<f64>() / per as f64;
        chunk.iter_mut().for_each(|v| *v -= m);
    }
}

/// Probe report with the pass rule: traditional within 10% of `1/(1-p)`,
/// proposed within 2% of 1 on the BN input.
pub fn bn_variance_report(cfg: &BnProbeConfig) -> Result<ProbeReport> {
    let res = bn_variance_probe(cfg)?;
    let mut r = ProbeReport::new("bnvar");
    let ratio = res.bn_input.mean_ratio();
    let (expected, tol) = match cfg.placement {
        Placement::Traditional => (1.0 / (1.0 - cfg.p), 0.10),
        Placement::Proposed => (1.0, 0.02),
    };
    r.metrics.push(ProbeMetric::info("p", cfg.p));
    r.metrics.push(ProbeMetric::info("bn_input_ratio", ratio));
    r.metrics.push(ProbeMetric::info("expected_ratio", expected));
    r.metrics
        .push(ProbeMetric::at_most("ratio_rel_dev", (ratio - expected).abs() / expected, tol));
    r.metrics
        .push(ProbeMetric::info("downstream_ratio", res.downstream.mean_ratio()));
    r.notes.push(format!(
        "{} placement; ratio = mean over channels of train_var / eval_var, {} batches of {}x{}x{}x{}",
        match cfg.placement {
            Placement::Traditional => "traditional",
            Placement::Proposed => "proposed",
        },
        cfg.batches,
        cfg.batch,
        cfg.channels,
        cfg.side,
        cfg.side
    ));
    Ok(r)
}

// ---------------------------------------------------------------------------
// Monte-Carlo expectation checks
// ---------------------------------------------------------------------------

/// Element-wise running mean and variance (Welford); exact for constant
/// streams.
#[derive(Debug, Clone)]
pub struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(len: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let k = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / k;
            *s += d * (v - *m);
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Standard error of each element's mean.
    pub fn std_err(&self) -> Vec<f64> {
        let n = self.n.max(2) as f64;
        self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
    }
}

/// Deviation of a Monte-Carlo mean from `target`, in standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McDeviation {
    /// Largest `|mean - target| / se` (infinite if an element with zero
    /// spread differs at all).
    pub max_z: f64,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    /// Largest standard error.
    pub max_se: f64,
}

impl McDeviation {
    pub fn within(&self, sigmas: f64) -> bool {
        self.max_z <= sigmas
    }
}

pub fn mc_deviation(acc: &Welford, target: &[f64]) -> McDeviation {
    let se = acc.std_err();
    let mut d = McDeviation {
        max_z: 0.0,
        max_abs_dev: 0.0,
        max_rel_dev: 0.0,
        max_se: 0.0,
    };
    let scale = target.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for ((m, t), s) in acc.mean().iter().zip(target).zip(&se) {
        let dev = (m - t).abs();
        let z = if *s > 0.0 {
            dev / s
        } else if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        d.max_z = d.max_z.max(z);
        d.max_abs_dev = d.max_abs_dev.max(dev);
        d.max_rel_dev = d.max_rel_dev.max(dev / scale);
        d.max_se = d.max_se.max(*s);
    }
    d
}

fn mc_metrics(r: &mut ProbeReport, d: McDeviation, expect_violation: bool) {
    r.metrics.push(ProbeMetric::info("max_abs_dev", d.max_abs_dev));
    r.metrics.push(ProbeMetric::info("max_rel_dev", d.max_rel_dev));
    r.metrics.push(ProbeMetric::info("max_std_err", d.max_se));
    r.metrics.push(if expect_violation {
        ProbeMetric::above("max_z", d.max_z, CLT_SIGMAS)
    } else {
        ProbeMetric::at_most("max_z", d.max_z, CLT_SIGMAS)
    });
}

/// Standard-normal tensor keyed by `seed`.
pub fn random_input(shape: Shape, seed: u64) -> Result<Tensor<f64>> {
    randn(shape, stream_for(seed, streams::PROBE), 3)
}

/// Move BN affine parameters off their initial values (`gamma` in
/// `[0.5, 1.5)`, `beta` in `[-0.5, 0.5)`). With `beta = 0`, a channel that is
/// constant over the batch (e.g. dropped in every sample) normalises to
/// exactly 0 and the following ReLU sits on its kink, where finite
/// differences are meaningless; gradient checks therefore run at such a
/// generic point.
pub fn perturb_batch_norms<'a, T: Real + 'a>(bns: impl IntoIterator<Item = &'a mut BatchNorm<T>>, seed: u64) {
    let mut rng = keyed_rng(stream_for(seed, streams::PROBE), DrawId::new(0, 0, 11));
    for bn in bns {
        for g in bn.gamma.iter_mut() {
            *g = T::of(rng.gen_range(0.5..1.5));
        }
        for b in bn.beta.iter_mut() {
            *b = T::of(rng.gen_range(-0.5..0.5));
        }
    }
}

/// End-to-end gradient check of a network built from `spec` with masks
/// frozen at one draw, on a `batch` of random inputs. With `single`, the
/// single-precision analytic gradients are compared against double-precision
/// finite differences.
pub fn network_grad_check(
    spec: &NetworkSpec,
    seed: u64,
    batch: usize,
    tol: f64,
    single: bool,
) -> Result<GradCheckReport> {
    let shape = Shape::new(batch, spec.input_channels, spec.input_size, spec.input_size);
    let x = random_input(shape, seed)?;
    let draw = DrawId::new(0, 1, 0);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    if single {
        let mut net = Network::<f32>::build(spec, seed)?;
        perturb_batch_norms(net.batch_norms_mut(), seed);
        grad_check_single(&net, &x.cast(), draw, tol, &opts)
    } else {
        let mut net = Network::<f64>::build(spec, seed)?;
        perturb_batch_norms(net.batch_norms_mut(), seed);
        let mut unit = Frozen { unit: net, draw };
        grad_check(&mut unit, &x, tol, &opts)
    }
}

fn randn(shape: Shape, stream: u64, step: u64) -> Result<Tensor<f64>> {
    let mut rng = keyed_rng(stream, DrawId::new(0, step, 7));
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| standard_normal(&mut rng)).collect())
}

/// Monte-Carlo mean of `mask(x)` over `draws` masks at one level, against
/// `x` itself (inverted scaling makes every level unbiased).
pub fn mask_unbiasedness(level: DropLevel, p: f64, draws: usize, seed: u64) -> Result<ProbeReport> {
    let stream = stream_for(seed, streams::PROBE);
    let x = randn(Shape::new(2, 8, 3, 3), stream, 0)?;
    let spec = DropSpec::new(level, p)?.with_stream(stream_for(seed, streams::MASK));
    let s = x.shape();
    let (rows, units) = match level {
        DropLevel::Neuron => (s.n, s.sample()),
        DropLevel::Channel => (s.n, s.c),
        DropLevel::Path => (1, 4),
        DropLevel::Layer => (1, 1),
    };
    let mut acc = Welford::new(x.len());
    for k in 0..draws {
        let m = DropMask::sample(&spec, rows, units, DrawId::new(0, k as u64, 0))?;
        acc.push(m.apply(&x)?.data());
    }
    let mut r = ProbeReport::new(format!("unbiased_{level}"));
    r.metrics.push(ProbeMetric::info("p", p));
    r.metrics.push(ProbeMetric::info("draws", draws as f64));
    mc_metrics(&mut r, mc_deviation(&acc, x.data()), false);
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// `neuron` or `channel` gating of the conv input.
    pub level: DropLevel,
    pub p: f64,
    pub draws: usize,
    /// Append a ReLU after the conv (breaks linearity).
    pub relu: bool,
    pub seed: u64,
}

impl EnsembleConfig {
    pub fn new(p: f64, draws: usize) -> Self {
        Self {
            level: DropLevel::Neuron,
            p,
            draws,
            relu: false,
            seed: 0,
        }
    }
}

/// Monte-Carlo mean of `conv(mask * x)` (no train-time scaling) against the
/// folded conv `conv_{(1-p) W}(x)`. Equal in expectation by linearity; a
/// trailing ReLU introduces a Jensen gap.
pub fn ensemble_equivalence(cfg: &EnsembleConfig) -> Result<ProbeReport> {
    if !matches!(cfg.level, DropLevel::Neuron | DropLevel::Channel) {
        return Err(config_err!("ensemble check gates conv inputs: use neuron or channel level"));
    }
    let stream = stream_for(cfg.seed, streams::PROBE);
    let x = randn(Shape::new(1, 4, 6, 6), stream, 1)?;
    let mut conv = Conv2d::<f64>::new(4, 4, 3, 1, 1, 1)?;
    conv.init_he(&mut keyed_rng(stream_for(cfg.seed, streams::INIT), DrawId::default()));
    let spec = DropSpec::new(cfg.level, cfg.p)?
        .with_scaling(Scaling::EvalWeightRescale)
        .with_stream(stream_for(cfg.seed, streams::MASK));
    let finish = |t: Tensor<f64>| if cfg.relu { relu_forward(&t) } else { t };
    let mut folded = conv.clone();
    scale_conv_inputs(&mut folded, &keep_probs(&spec, 4)?)?;
    let target = finish(folded.forward(&x)?);
    let s = x.shape();
    let (rows, units) = match cfg.level {
        DropLevel::Neuron => (s.n, s.sample()),
        _ => (s.n, s.c),
    };
    let mut acc = Welford::new(target.len());
    for k in 0..cfg.draws {
        let m = DropMask::sample(&spec, rows, units, DrawId::new(0, k as u64, 0))?;
        acc.push(finish(conv.forward(&m.apply(&x)?)?).data());
    }
    let mut r = ProbeReport::new(if cfg.relu { "ensemble_relu" } else { "ensemble" });
    r.metrics.push(ProbeMetric::info("p", cfg.p));
    r.metrics.push(ProbeMetric::info("draws", cfg.draws as f64));
    let d = mc_deviation(&acc, target.data());
    mc_metrics(&mut r, d, false);
    if cfg.relu && !d.within(CLT_SIGMAS) {
        r.notes.push(
            "deviation exceeds the CLT bound: weight folding equals the dropout ensemble only before a \
             nonlinearity (Jensen gap of the ReLU)"
                .into(),
        );
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropPathConfig {
    pub channels: usize,
    pub paths: usize,
    pub width: usize,
    pub p: f64,
    pub draws: usize,
    pub seed: u64,
}

impl DropPathConfig {
    pub fn new(paths: usize, p: f64, draws: usize) -> Self {
        Self {
            channels: 16,
            paths,
            width: 2,
            p,
            draws,
            seed: 0,
        }
    }
}

/// Monte-Carlo mean of the path-gated bottleneck output against the ungated
/// output, with frozen weights and input.
pub fn droppath_expectation(cfg: &DropPathConfig) -> Result<ProbeReport> {
    let spec = DropSpec::new(DropLevel::Path, cfg.p)?;
    let bc = BlockConfig::bottleneck(cfg.channels, cfg.paths, Some(cfg.width)).with_drop(spec.clone());
    let mut block = Block::<f64>::from_seed(&bc, cfg.seed)?;
    let x = randn(Shape::new(2, cfg.channels, 3, 3), stream_for(cfg.seed, streams::PROBE), 2)?;
    let BlockBody::Bottleneck(b) = &mut block.body else {
        unreachable!("bottleneck config builds a bottleneck")
    };
    let all_open = DropMask::identity(DropLevel::Path, 1, cfg.paths);
    let target = b.forward_train_with(&x, DrawId::default(), Some(&all_open))?;
    let mut acc = Welford::new(target.len());
    let mut all_dropped = 0;
    for k in 0..cfg.draws {
        let y = b.forward_train_with(&x, DrawId::new(0, k as u64, 0), None)?;
        acc.push(y.data());
        all_dropped += b.all_paths_dropped;
        b.all_paths_dropped = 0;
    }
    let mut r = ProbeReport::new("droppath");
    r.metrics.push(ProbeMetric::info("paths", cfg.paths as f64));
    r.metrics.push(ProbeMetric::info("p", cfg.p));
    r.metrics.push(ProbeMetric::info("draws", cfg.draws as f64));
    r.metrics.push(ProbeMetric::info("all_paths_dropped", all_dropped as f64));
    mc_metrics(&mut r, mc_deviation(&acc, target.data()), false);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockConfig;

    fn randt(s: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        randn(s.into(), seed, 0).unwrap()
    }

    fn opts() -> GradCheckOptions {
        GradCheckOptions::default()
    }

    #[test]
    fn linear_layer_passes() {
        let mut lin = Linear::<f64>::new(6, 3).unwrap();
        lin.init_he(&mut keyed_rng(1, DrawId::default()));
        let mut u = WithInput::new(lin);
        let rep = grad_check(&mut u, &randt((2, 6, 1, 1), 2), 1e-6, &opts()).unwrap();
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn proposed_block_with_frozen_mask_passes() {
        let cfg = BlockConfig::proposed(4).with_drop(DropSpec::new(DropLevel::Channel, 0.3).unwrap());
        let mut u = Frozen {
            unit: Block::<f64>::from_seed(&cfg, 3).unwrap(),
            draw: DrawId::new(0, 5, 0),
        };
        let rep = grad_check(&mut u, &randt((3, 4, 4, 4), 4), 1e-6, &opts()).unwrap();
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn wrn_micro_network_check_passes() {
        let mut spec = NetworkSpec::preset("wrn-micro").unwrap();
        spec.input_size = 8;
        spec.drops = vec![DropSpec::new(DropLevel::Channel, 0.2).unwrap()];
        let rep = network_grad_check(&spec, 1, 2, 1e-6, false).unwrap();
        assert!(rep.pass(), "{}", rep.max_rel_err());
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut lin = Linear::<f64>::new(4, 2).unwrap();
        lin.init_he(&mut keyed_rng(1, DrawId::default()));
        let mut u = FaultInjected {
            unit: WithInput::new(lin),
            offset: 1e-3,
        };
        let rep = grad_check(&mut u, &randt((2, 4, 1, 1), 2), 1e-6, &opts()).unwrap();
        assert!(!rep.pass());
    }

    #[test]
    fn bn_probe_zero_rate_is_one() {
        let mut cfg = BnProbeConfig::new(Placement::Traditional, 0.0);
        cfg.batch = 64;
        cfg.batches = 5;
        let r = bn_variance_probe(&cfg).unwrap();
        assert!((r.bn_input.mean_ratio() - 1.0).abs() < 0.02);
    }

    #[test]
    fn ensemble_zero_rate_is_exact() {
        let r = ensemble_equivalence(&EnsembleConfig::new(0.0, 50)).unwrap();
        assert_eq!(r.metric("max_abs_dev"), Some(0.0));
        let r = droppath_expectation(&DropPathConfig::new(8, 0.0, 20)).unwrap();
        assert_eq!(r.metric("max_abs_dev"), Some(0.0));
    }

    #[test]
    fn welford_constant_stream_is_exact() {
        let mut w = Welford::new(2);
        for _ in 0..1000 {
            w.push(&[0.1, -3.7]);
        }
        assert_eq!(w.mean(), &[0.1, -3.7]);
        assert_eq!(w.std_err(), vec![0.0, 0.0]);
    }

    #[test]
    fn csv_rows_format() {
        let mut r = ProbeReport::new("x");
        r.metrics.push(ProbeMetric::at_most("a", 0.5, 1.0));
        r.metrics.push(ProbeMetric::info("b", 2.0));
        assert_eq!(r.csv_rows(), "x,a,0.5,1,true\nx,b,2,,\n");
        assert!(r.pass());
    }
}
