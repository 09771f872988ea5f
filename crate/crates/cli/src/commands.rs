//! The four subcommands. Each returns its printable report; nothing is
//! written outside the configured output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use convdrop::diagnostics::{
    bn_variance_report, droppath_expectation, ensemble_equivalence, network_grad_check, BnProbeConfig,
    DropPathConfig, EnsembleConfig, ProbeReport,
};
use convdrop::trainer::{eval_view, evaluate, metrics_csv, sig6, train, MetricsRecord};
use convdrop::{DropLevel, DropSpec, Network, NetworkSpec, NetworkState, Parameterized, Placement, Real};

use crate::config::{ExperimentConfig, Precision, Splits};
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.txt";

const EVAL_BATCH: usize = 250;

/// Flags of `train`; each one overrides the config field of the same name.
#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    /// Divergence message when training stopped on a non-finite loss.
    pub aborted: Option<String>,
    pub summary: String,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Failed(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("cannot create {}: {e}", dir.display())))
}

fn conv_params(net: &Network<impl Real>) -> Result<usize, CliError> {
    Ok(net.block_summaries()?.iter().map(|b| b.conv_params).sum())
}

/// Train the configured network. Writes `metrics.csv`, `summary.txt`,
/// `model.json` and the effective `config.toml` into the output directory.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let spec = cfg.network_spec()?;
    let splits = cfg.load_data()?;
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir, CONFIG_FILE, &cfg.to_toml())?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &spec, &splits),
        Precision::F64 => train_typed::<f64>(&cfg, &spec, &splits),
    }
}

fn train_typed<T: Real>(cfg: &ExperimentConfig, spec: &NetworkSpec, splits: &Splits) -> Result<TrainReport, CliError> {
    let dir = &cfg.output_dir;
    let mut net = Network::<T>::build(spec, cfg.train.seed)?;
    let outcome = train(&mut net, &splits.train, &splits.test, &cfg.train, &cfg.augment, |r| {
        eprintln!(
            "epoch {:>3}  loss {}  train_err {}  test_err {}  lr {}",
            r.epoch,
            sig6(r.train_loss),
            sig6(r.train_error),
            sig6(r.test_error),
            sig6(r.lr)
        );
    })?;
    write_file(dir, METRICS_FILE, &metrics_csv(&outcome.records))?;
    let state = net.export_state();
    let json = serde_json::to_string(&state).map_err(|e| CliError::Failed(e.to_string()))?;
    write_file(dir, MODEL_FILE, &json)?;

    let mut s = String::new();
    let name = cfg.network.preset.as_deref().unwrap_or("custom");
    let last = outcome.records.last();
    let _ = writeln!(s, "network            {name}");
    let _ = writeln!(s, "precision          {:?}", cfg.precision);
    let _ = writeln!(s, "seed               {}", cfg.train.seed);
    let _ = writeln!(s, "epochs             {}/{}", outcome.records.len(), cfg.train.epochs);
    let _ = writeln!(s, "train_samples      {}", splits.train.len());
    let _ = writeln!(s, "test_samples       {}", splits.test.len());
    let _ = writeln!(s, "trainable_params   {}", net.num_trainable());
    let _ = writeln!(s, "conv_params        {}", conv_params(&net)?);
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), sig6);
    let _ = writeln!(s, "best_test_error    {}", fmt(outcome.best_test_error()));
    let _ = writeln!(s, "final_train_error  {}", fmt(last.map(|r| r.train_error)));
    let _ = writeln!(s, "final_test_error   {}", fmt(last.map(|r| r.test_error)));
    if cfg.train.record_wall_time {
        let _ = writeln!(s, "wall_seconds       {}", sig6(outcome.wall_seconds));
    }
    let _ = writeln!(
        s,
        "status             {}",
        outcome.aborted.as_deref().map_or("ok".to_string(), |m| format!("aborted: {m}"))
    );
    write_file(dir, SUMMARY_FILE, &s)?;
    Ok(TrainReport {
        out_dir: dir.clone(),
        records: outcome.records,
        aborted: outcome.aborted,
        summary: s,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub config: PathBuf,
    /// Defaults to `model.json` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Evaluate a trained checkpoint on both splits; writes `eval.txt`.
pub fn cmd_eval(args: &EvalArgs) -> Result<String, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join(MODEL_FILE));
    let text = fs::read_to_string(&ckpt)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", ckpt.display())))?;
    let state: NetworkState = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", ckpt.display())))?;
    let splits = cfg.load_data()?;
    let report = match cfg.precision {
        Precision::F32 => eval_typed::<f32>(&state, &splits)?,
        Precision::F64 => eval_typed::<f64>(&state, &splits)?,
    };
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir, EVAL_FILE, &report)?;
    Ok(report)
}

fn eval_typed<T: Real>(state: &NetworkState, splits: &Splits) -> Result<String, CliError> {
    let net = Network::<T>::from_state(state)?;
    let (c, h, _) = splits.test.geometry;
    if c != net.spec.input_channels || h != net.spec.input_size {
        return Err(CliError::Config(format!(
            "checkpoint expects {}x{s}x{s} inputs, data is {c}x{h}x{h}",
            net.spec.input_channels,
            s = net.spec.input_size
        )));
    }
    let view = eval_view(&net)?;
    let (train_loss, train_error) = evaluate(&view, &splits.train, EVAL_BATCH)?;
    let (test_loss, test_error) = evaluate(&view, &splits.test, EVAL_BATCH)?;
    let mut s = String::new();
    let _ = writeln!(s, "split,loss,error");
    let _ = writeln!(s, "train,{},{}", sig6(train_loss), sig6(train_error));
    let _ = writeln!(s, "test,{},{}", sig6(test_loss), sig6(test_error));
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    GradCheck,
    BnVar,
    Ensemble,
    DropPath,
}

#[derive(Debug, Clone)]
pub struct DiagnoseArgs {
    pub probe: Probe,
    pub p: f64,
    pub placement: Placement,
    pub relu: bool,
    /// Monte-Carlo draws; per-probe default when absent.
    pub draws: Option<usize>,
    pub paths: usize,
    pub seed: u64,
    /// Directory for `diagnose-<probe>.csv`; nothing is written without it.
    pub out: Option<PathBuf>,
}

impl DiagnoseArgs {
    pub fn new(probe: Probe) -> Self {
        Self {
            probe,
            p: 0.25,
            placement: Placement::Traditional,
            relu: false,
            draws: None,
            paths: 8,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiagnoseOutcome {
    pub reports: Vec<ProbeReport>,
}

impl DiagnoseOutcome {
    pub fn pass(&self) -> bool {
        self.reports.iter().all(ProbeReport::pass)
    }

    pub fn text(&self) -> String {
        self.reports.iter().map(|r| r.to_string()).collect()
    }
}

/// The desk-scale network used by the gradient probe: `wrn-micro` on 8x8
/// inputs with drop-channel at rate `p` in every block.
pub fn gradcheck_spec(p: f64, placement: Placement) -> Result<NetworkSpec, CliError> {
    let mut spec = NetworkSpec::preset("wrn-micro")?;
    spec.input_size = 8;
    for s in &mut spec.stages {
        s.inner = placement;
    }
    if p > 0.0 {
        spec.drops = vec![DropSpec::new(DropLevel::Channel, p)?];
    }
    Ok(spec)
}

/// Run one diagnostic probe.
pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<DiagnoseOutcome, CliError> {
    if !(0.0..1.0).contains(&args.p) {
        return Err(CliError::Config(format!("--p must lie in [0, 1), got {}", args.p)));
    }
    if args.draws == Some(0) {
        return Err(CliError::Config("--draws must be positive".into()));
    }
    let reports = match args.probe {
        Probe::GradCheck => {
            let spec = gradcheck_spec(args.p, args.placement)?;
            let double = network_grad_check(&spec, args.seed, 2, 1e-6, false)?;
            let single = network_grad_check(&spec, args.seed, 2, 1e-4, true)?;
            vec![double.to_probe("gradcheck_f64"), single.to_probe("gradcheck_f32")]
        }
        Probe::BnVar => {
            let cfg = BnProbeConfig {
                seed: args.seed,
                ..BnProbeConfig::new(args.placement, args.p)
            };
            vec![bn_variance_report(&cfg)?]
        }
        Probe::Ensemble => {
            let cfg = EnsembleConfig {
                relu: args.relu,
                seed: args.seed,
                ..EnsembleConfig::new(args.p, args.draws.unwrap_or(100_000))
            };
            vec![ensemble_equivalence(&cfg)?]
        }
        Probe::DropPath => {
            if args.paths == 0 || !args.paths.is_power_of_two() {
                return Err(CliError::Config(format!("--paths must be a power of two, got {}", args.paths)));
            }
            let cfg = DropPathConfig {
                seed: args.seed,
                ..DropPathConfig::new(args.paths, args.p, args.draws.unwrap_or(20_000))
            };
            vec![droppath_expectation(&cfg)?]
        }
    };
    let outcome = DiagnoseOutcome { reports };
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let mut csv = format!("{}\n", ProbeReport::CSV_HEADER);
        for r in &outcome.reports {
            csv.push_str(&r.csv_rows());
        }
        let name = match args.probe {
            Probe::GradCheck => "gradcheck",
            Probe::BnVar => "bnvar",
            Probe::Ensemble => "ensemble",
            Probe::DropPath => "droppath",
        };
        write_file(dir, &format!("diagnose-{name}.csv"), &csv)?;
    }
    Ok(outcome)
}

/// Per-block parameter table and per-stage component census.
pub fn cmd_inspect(config: &Path) -> Result<String, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let spec = cfg.network_spec()?;
    inspect_spec(&spec)
}

pub fn inspect_spec(spec: &NetworkSpec) -> Result<String, CliError> {
    let net = Network::<f64>::build(spec, 0)?;
    let blocks = net.block_summaries()?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5} {:>5} {:<20} {:>5} {:>5} {:>6} {:>5} {:>5} {:>11} {:>9}  output",
        "block", "stage", "kind", "c_in", "c_out", "stride", "paths", "width", "conv_params", "bn_params"
    );
    for b in &blocks {
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:<20} {:>5} {:>5} {:>6} {:>5} {:>5} {:>11} {:>9}  {}",
            b.index,
            b.stage,
            b.kind.to_string(),
            b.c_in,
            b.c_out,
            b.stride,
            b.paths,
            b.width,
            b.conv_params,
            b.bn_params,
            b.output
        );
    }
    if !blocks.is_empty() {
        let _ = writeln!(
            s,
            "total block conv params {}, bn params {}",
            blocks.iter().map(|b| b.conv_params).sum::<usize>(),
            blocks.iter().map(|b| b.bn_params).sum::<usize>()
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>5} {:>6} {:>5} {:>5} {:>4} {:>4} {:>10} {:>8} {:>6} {:>6}",
        "stage", "layers", "paths", "width", "w", "h", "neuron", "channel", "path", "layer"
    );
    for (i, (g, c)) in net.stage_geometries()?.into_iter().zip(net.census()?).enumerate() {
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>5} {:>5} {:>4} {:>4} {:>10} {:>8} {:>6} {:>6}",
            i, g.layers, g.paths, g.width, g.w, g.h, c.neuron, c.channel, c.path, c.layer
        );
    }
    Ok(s)
}
