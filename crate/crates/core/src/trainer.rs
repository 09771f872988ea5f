//! Softmax cross-entropy, SGD with Nesterov momentum, step-decay schedule
//! and the deterministic training loop.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, epoch_permutation, AugmentPolicy, Dataset};
use crate::drop::Scaling;
use crate::error::{config_err, shape_err, Result};
use crate::layers::Parameterized;
use crate::network::Network;
use crate::rng::DrawId;
use crate::tensor::{Real, Tensor};

fn default_lr() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    0.9
}

fn default_wd() -> f64 {
    1e-4
}

fn default_batch() -> usize {
    64
}

fn default_drops() -> Vec<f64> {
    vec![0.5, 0.75]
}

fn default_factor() -> f64 {
    0.1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub dampening: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Apply weight decay to BN `gamma`/`beta` as well.
    #[serde(default = "yes")]
    pub decay_bn: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: usize,
    /// Fractions of `epochs` at which the rate is multiplied by the factor.
    #[serde(default = "default_drops")]
    pub lr_drop_points: Vec<f64>,
    #[serde(default = "default_factor")]
    pub lr_drop_factor: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write measured wall time into the metrics; off keeps them byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: default_lr(),
            momentum: default_momentum(),
            dampening: 0.0,
            weight_decay: default_wd(),
            decay_bn: true,
            batch_size: default_batch(),
            epochs: 0,
            lr_drop_points: default_drops(),
            lr_drop_factor: default_factor(),
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(config_err!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.dampening) {
            return Err(config_err!("dampening must lie in [0, 1], got {}", self.dampening));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.lr_drop_factor > 0.0) {
            return Err(config_err!("lr_drop_factor must be > 0"));
        }
        let pts = &self.lr_drop_points;
        if pts.iter().any(|&p| !(p > 0.0 && p < 1.0)) || pts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("lr_drop_points must be strictly increasing within (0, 1), got {pts:?}"));
        }
        Ok(())
    }
}

/// `lr0 * factor^(drop points passed)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg
        .lr_drop_points
        .iter()
        .filter(|&&p| epoch as f64 >= p * cfg.epochs as f64)
        .count();
    cfg.lr0 * cfg.lr_drop_factor.powi(passed as i32)
}

/// Mean `-log softmax(logits)[label]` and its gradient `(softmax - onehot) / N`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    let k = s.sample();
    if s.n != labels.len() {
        return Err(shape_err!("{} logits rows but {} labels", s.n, labels.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(config_err!("label {l} outside 0..{k}"));
    }
    let mut grad = Vec::with_capacity(s.numel());
    let mut loss = 0.0;
    let n = s.n as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.sample(i).iter().map(|v| v.f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            grad.push(T::of((p - if j == label { 1.0 } else { 0.0 }) / n));
        }
    }
    Ok((loss / n, Tensor::from_vec(s, grad)?))
}

/// Momentum buffers for every trainable tensor, in visiting order.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }

    /// `g' = g + wd*theta; v = m*v + (1 - dampening)*g'; theta -= lr*(g' + m*v)`.
    pub fn step(&mut self, net: &mut impl Parameterized<T>, cfg: &TrainConfig, lr: f64) {
        let (m, damp) = (cfg.momentum, cfg.dampening);
        let velocity = &mut self.velocity;
        let mut idx = 0;
        net.visit_params("", &mut |p| {
            if velocity.len() <= idx {
                velocity.push(vec![T::zero(); p.value.len()]);
            }
            let wd = if cfg.decay_bn || !p.kind.is_batch_norm() { cfg.weight_decay } else { 0.0 };
            let v = &mut velocity[idx];
            for ((theta, &g), vi) in p.value.iter_mut().zip(p.grad.iter()).zip(v.iter_mut()) {
                let g = g.f64() + wd * theta.f64();
                let nv = m * vi.f64() + (1.0 - damp) * g;
                *vi = T::of(nv);
                *theta = T::of(theta.f64() - lr * (g + m * nv));
            }
            idx += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent misclassified on the training split (eval mode, no augmentation).
    pub train_error: f64,
    pub test_error: f64,
    pub lr: f64,
    pub wall_seconds: f64,
    pub all_paths_dropped: u64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_error,test_error,lr,wall_seconds,all_paths_dropped";

/// Format with 6 significant digits, `%g` style.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    // Round first: 999999.5 must switch to scientific notation.
    let rounded: f64 = format!("{x:.5e}").parse().unwrap_or(x);
    let exp = if rounded != 0.0 { rounded.abs().log10().floor() as i32 } else { exp };
    if (-5..6).contains(&exp) {
        trim(format!("{:.*}", (5 - exp) as usize, rounded))
    } else {
        let s = format!("{rounded:.5e}");
        let (mant, e) = s.split_once('e').unwrap_or((&s, "0"));
        format!("{}e{}", trim(mant.to_string()), e)
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            sig6(r.train_loss),
            sig6(r.train_error),
            sig6(r.test_error),
            sig6(r.lr),
            sig6(r.wall_seconds),
            r.all_paths_dropped
        );
    }
    out
}

/// Result of a training run; `aborted` carries the divergence diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub aborted: Option<String>,
    pub wall_seconds: f64,
}

impl TrainOutcome {
    pub fn best_test_error(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.test_error)
            .filter(|e| e.is_finite())
            .min_by(f64::total_cmp)
    }
}

/// Mean loss and percent error of eval-mode predictions.
pub fn evaluate<T: Real>(net: &Network<T>, ds: &Dataset, batch: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut wrong) = (0.0, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = ds.batch::<T>(chunk)?;
        let logits = net.forward_eval(&x)?;
        loss += cross_entropy(&logits, &y)?.0 * chunk.len() as f64;
        wrong += count_wrong(&logits, &y);
    }
    Ok((loss / ds.len() as f64, 100.0 * wrong as f64 / ds.len() as f64))
}

fn count_wrong<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.sample(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].f64().total_cmp(&row[b].f64()).then(b.cmp(&a)))
                .unwrap_or(0);
            best != l
        })
        .count()
}

fn has_rescale_sites<T: Real>(net: &Network<T>) -> bool {
    net.blocks
        .iter()
        .flat_map(|b| b.config.drops.iter())
        .any(|d| d.scaling == Scaling::EvalWeightRescale && d.rate > 0.0)
}

/// Network used for evaluation: a folded copy when any drop site relies on
/// eval-time weight rescaling.
pub fn eval_view<T: Real>(net: &Network<T>) -> Result<Cow<'_, Network<T>>> {
    if !net.folded && has_rescale_sites(net) {
        let mut c = net.clone();
        c.fold_rescale_into_weights()?;
        Ok(Cow::Owned(c))
    } else {
        Ok(Cow::Borrowed(net))
    }
}

const EVAL_BATCH: usize = 250;

/// Train for `cfg.epochs`, evaluating after every epoch. Data order, masks
/// and augmentation are keyed by `cfg.seed`. `on_epoch` sees each record as
/// it is produced.
pub fn train<T: Real>(
    net: &mut Network<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    augment: &AugmentPolicy,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (c, h, w) = train_set.geometry;
    if c != net.spec.input_channels || h != w {
        return Err(shape_err!(
            "dataset images are {c}x{h}x{w}, network expects {} square channels",
            net.spec.input_channels
        ));
    }
    let start = Instant::now();
    let mut sgd = Sgd::<T>::new();
    let mut records = Vec::new();
    let n = train_set.len();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let order = epoch_permutation(n, cfg.seed, epoch as u64);
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch::<f64>(idx)?;
            let x: Tensor<T> = augment_batch(&x, idx, augment, cfg.seed, epoch as u64)?.cast();
            let logits = net.forward_train(&x, DrawId::new(epoch as u64, step as u64, 0))?;
            let (loss, grad) = cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                let msg = format!("non-finite loss {loss} at epoch {epoch}, step {step}");
                let rec = MetricsRecord {
                    epoch,
                    train_loss: loss,
                    train_error: f64::NAN,
                    test_error: f64::NAN,
                    lr,
                    wall_seconds: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
                    all_paths_dropped: net.take_all_paths_dropped(),
                };
                on_epoch(&rec);
                records.push(rec);
                return Ok(TrainOutcome {
                    records,
                    aborted: Some(msg),
                    wall_seconds: start.elapsed().as_secs_f64(),
                });
            }
            loss_sum += loss * idx.len() as f64;
            net.zero_grad();
            net.backward(&grad)?;
            sgd.step(net, cfg, lr);
        }
        let view = eval_view(net)?;
        let (_, train_error) = evaluate(&view, train_set, EVAL_BATCH)?;
        let (_, test_error) = evaluate(&view, test_set, EVAL_BATCH)?;
        drop(view);
        let rec = MetricsRecord {
            epoch,
            train_loss: if n > 0 { loss_sum / n as f64 } else { 0.0 },
            train_error,
            test_error,
            lr,
            wall_seconds: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
            all_paths_dropped: net.take_all_paths_dropped(),
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(TrainOutcome {
        records,
        aborted: None,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthParams};
    use crate::network::{NetworkSpec, StageSpec, StemSpec};
    use crate::blocks::BlockKind;
    use crate::rng::{keyed_rng, standard_normal};

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros((3, 7, 1, 1)).unwrap();
        let (l, _) = cross_entropy(&logits, &[0, 3, 6]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let logits = Tensor::<f64>::from_vec((1, 3, 1, 1), vec![1000.0, 0.0, -1000.0]).unwrap();
        let (l, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = keyed_rng(5, DrawId::default());
        let data: Vec<f64> = (0..12).map(|_| standard_normal(&mut rng)).collect();
        let x = Tensor::from_vec((3, 4, 1, 1), data).unwrap();
        let labels = [1, 0, 3];
        let (_, g) = cross_entropy(&x, &labels).unwrap();
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-5;
            let mut m = x.clone();
            m.data_mut()[i] -= 1e-5;
            let fd = (cross_entropy(&p, &labels).unwrap().0 - cross_entropy(&m, &labels).unwrap().0) / 2e-5;
            let a = g.data()[i];
            assert!((fd - a).abs() / a.abs().max(fd.abs()).max(1e-8) <= 1e-6, "{i}: {fd} vs {a}");
        }
    }

    /// Single scalar parameter for optimizer arithmetic.
    struct Scalar {
        value: [f64; 1],
        grad: [f64; 1],
    }

    impl Parameterized<f64> for Scalar {
        fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(crate::layers::ParamMut<'_, f64>)) {
            f(crate::layers::ParamMut {
                name: "s",
                kind: crate::layers::ParamKind::ConvWeight,
                value: &mut self.value,
                grad: &mut self.grad,
            });
        }
    }

    fn cfg(m: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            momentum: m,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn nesterov_arithmetic() {
        let mut s = Scalar { value: [1.0], grad: [1.0] };
        let mut opt = Sgd::new();
        opt.step(&mut s, &cfg(0.0, 0.0), 0.1);
        assert!((s.value[0] - 0.9).abs() < 1e-15);

        let mut s = Scalar { value: [0.0], grad: [1.0] };
        let mut opt = Sgd::new();
        opt.step(&mut s, &cfg(0.9, 0.0), 0.1);
        assert_eq!(opt.velocity[0][0], 1.0);
        assert!((s.value[0] + 0.19).abs() < 1e-15);

        let mut s = Scalar { value: [1.0], grad: [0.0] };
        let mut opt = Sgd::new();
        opt.step(&mut s, &cfg(0.0, 1e-4), 0.1);
        assert!((s.value[0] - (1.0 - 0.1 * 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig {
            epochs: 300,
            ..TrainConfig::default()
        };
        assert!((lr_at(149, &c) - 0.1).abs() < 1e-15);
        assert!((lr_at(150, &c) - 0.01).abs() < 1e-15);
        assert!((lr_at(225, &c) - 0.001).abs() < 1e-15);
        let flat = TrainConfig {
            lr_drop_points: vec![],
            ..c.clone()
        };
        assert_eq!(lr_at(299, &flat), 0.1);
        let unit = TrainConfig {
            lr_drop_factor: 1.0,
            ..c
        };
        assert_eq!(lr_at(299, &unit), 0.1);
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            TrainConfig { lr0: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { lr_drop_points: vec![0.75, 0.5], ..TrainConfig::default() },
            TrainConfig { lr_drop_points: vec![1.0], ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn sig6_format() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(2.302585093), "2.30259");
        assert_eq!(sig6(100.0), "100");
        assert_eq!(sig6(0.001), "0.001");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(999999.6), "1e6");
        assert_eq!(sig6(1e-7), "1e-7");
        assert_eq!(sig6(-0.5), "-0.5");
    }

    fn tiny_net() -> NetworkSpec {
        NetworkSpec {
            input_channels: 3,
            input_size: 8,
            stem: Some(StemSpec { channels: 8, kernel: 3 }),
            stages: vec![StageSpec::new(BlockKind::ProposedPreact, 8, 1), StageSpec::new(BlockKind::ProposedPreact, 16, 1)],
            num_classes: 4,
            drops: vec![],
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        synth_dataset(&SynthParams {
            size: 8,
            ..SynthParams::new(n, 4, seed)
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_leave_net_untouched() {
        let spec = tiny_net();
        let mut net = Network::<f64>::build(&spec, 1).unwrap();
        let before = net.clone();
        let data = tiny_data(16, 1);
        let out = train(&mut net, &data, &data, &TrainConfig::default(), &AugmentPolicy::default(), |_| {}).unwrap();
        assert!(out.records.is_empty());
        let mut a = Vec::new();
        let mut b = Vec::new();
        net.visit_params("", &mut |p| a.extend_from_slice(p.value));
        before.clone().visit_params("", &mut |p| b.extend_from_slice(p.value));
        assert_eq!(a, b);
    }

    #[test]
    fn training_is_reproducible() {
        let spec = tiny_net();
        let data = tiny_data(64, 2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut net = Network::<f64>::build(&spec, cfg.seed).unwrap();
            metrics_csv(&train(&mut net, &data, &data, &cfg, &AugmentPolicy::standard(), |_| {}).unwrap().records)
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.lines().count(), 3);
    }

    #[test]
    fn small_lr_descends_on_fixed_batch() {
        let spec = tiny_net();
        let mut net = Network::<f64>::build(&spec, 3).unwrap();
        let data = tiny_data(16, 3);
        let (x, y) = data.batch::<f64>(&(0..16).collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = Sgd::new();
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let logits = net.forward_train(&x, DrawId::new(0, step, 0)).unwrap();
            let (loss, g) = cross_entropy(&logits, &y).unwrap();
            assert!(loss <= prev + 1e-12, "step {step}: {loss} > {prev}");
            prev = loss;
            net.zero_grad();
            net.backward(&g).unwrap();
            opt.step(&mut net, &cfg, 1e-4);
        }
    }

    #[test]
    fn divergence_aborts_with_partial_metrics() {
        let spec = tiny_net();
        let mut net = Network::<f64>::build(&spec, 3).unwrap();
        let data = tiny_data(16, 3);
        let cfg = TrainConfig {
            lr0: 1e30,
            epochs: 5,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(&mut net, &data, &data, &cfg, &AugmentPolicy::default(), |_| {}).unwrap();
        assert!(out.aborted.is_some());
        assert!(out.records.len() <= 5);
        assert!(!out.records.last().unwrap().train_loss.is_finite());
    }
}
