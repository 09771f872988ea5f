//! End-to-end tests of the `convdrop` binary: exit codes, outputs and
//! confinement of writes to the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use convdrop_cli::ExperimentConfig;

fn convdrop(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convdrop"))
        .args(args)
        .current_dir(cwd)
        .env("CONVDROP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const MICRO: &str = r#"
output_dir = "out"

[network]
preset = "wrn-micro"

[train]
epochs = 2
batch_size = 32

[data.synth]
test_n = 32
[data.synth.params]
n = 64
size = 8
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn train_writes_only_under_output_dir_and_eval_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), MICRO);
    let o = convdrop(dir.path(), &["train", "exp.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.starts_with("epoch,train_loss,train_error,test_error,lr,wall_seconds,all_paths_dropped\n"));
    let summary = fs::read_to_string(dir.path().join("out/summary.txt")).unwrap();
    assert!(summary.contains("trainable_params") && summary.contains("best_test_error"), "{summary}");
    let mut top: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    top.sort();
    assert_eq!(top, ["exp.toml", "out"]);

    let o = convdrop(dir.path(), &["eval", "exp.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("split,loss,error\ntrain,"));
    // The checkpoint reproduces the final test error of training.
    let last = csv.lines().last().unwrap().split(',').nth(3).unwrap().to_string();
    let eval_test = stdout(&o).lines().nth(2).unwrap().split(',').nth(2).unwrap().to_string();
    assert_eq!(last, eval_test);
    let saved: ExperimentConfig =
        ExperimentConfig::parse(&fs::read_to_string(dir.path().join("out/config.toml")).unwrap()).unwrap();
    assert_eq!(saved.train.epochs, 2);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), MICRO);
    let o = convdrop(dir.path(), &["train", "exp.toml", "--epochs", "1", "--seed", "5", "--out", "elsewhere"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("elsewhere/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(!dir.path().join("out").exists());
    let saved = fs::read_to_string(dir.path().join("elsewhere/config.toml")).unwrap();
    assert!(saved.contains("seed = 5"), "{saved}");
}

#[test]
fn divergence_exits_nonzero_with_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &MICRO.replace("epochs = 2", "epochs = 3\nlr0 = 1e30"));
    let o = convdrop(dir.path(), &["train", "exp.toml"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let summary = fs::read_to_string(dir.path().join("out/summary.txt")).unwrap();
    assert!(summary.contains("aborted: non-finite loss"), "{summary}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = convdrop(dir.path(), &["train", "missing.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.toml"));

    write_config(dir.path(), &MICRO.replace("epochs = 2", "epochs = [2"));
    let o = convdrop(dir.path(), &["train", "exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    write_config(dir.path(), &MICRO.replace("batch_size = 32", "batch_size = 0"));
    let o = convdrop(dir.path(), &["inspect", "exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train: "), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_convdrop"))
        .args(["inspect", "exp.toml"])
        .current_dir(dir.path())
        .env("CONVDROP_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diagnose_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = convdrop(dir.path(), &["diagnose", "--probe", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));

    let o = convdrop(dir.path(), &["diagnose", "--probe", "gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("gradcheck_f64: PASS") && stdout(&o).contains("gradcheck_f32: PASS"));

    let o = convdrop(dir.path(), &["diagnose", "--probe", "bnvar", "--placement", "traditional", "--p", "0.25"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let line = stdout(&o).lines().find(|l| l.contains("bn_input_ratio")).unwrap().to_string();
    let ratio: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((ratio - 4.0 / 3.0).abs() < 0.05, "{line}");

    let o = convdrop(dir.path(), &["diagnose", "--probe", "ensemble", "--relu", "--draws", "20000"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("Jensen gap"), "{}", stdout(&o));

    let o = convdrop(
        dir.path(),
        &["diagnose", "--probe", "droppath", "--paths", "4", "--draws", "4000", "--out", "diag"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let csv = fs::read_to_string(dir.path().join("diag/diagnose-droppath.csv")).unwrap();
    assert!(csv.starts_with("probe,metric,value,bound,pass\n"));

    let o = convdrop(dir.path(), &["diagnose", "--probe", "droppath", "--paths", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_tables() {
    let cfgs = configs_dir();
    let o = convdrop(&cfgs, &["inspect", "bottleneck-256.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let row = out.lines().nth(1).unwrap();
    assert!(row.contains("droppath_bottleneck") && row.split_whitespace().nth(8) == Some("70144"), "{out}");

    let o = convdrop(&cfgs, &["inspect", "resnext-micro-synth.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let census: Vec<Vec<usize>> = out
        .lines()
        .skip_while(|l| !l.trim_start().starts_with("stage layers"))
        .skip(1)
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(census.len(), 3, "{out}");
    for r in census {
        let (neuron, channel, path, layer) = (r[6], r[7], r[8], r[9]);
        assert!(neuron > channel && channel > path && path > layer, "{r:?}");
    }

    let o = convdrop(&cfgs, &["inspect", "empty.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| !l.trim().is_empty()).count(), 2, "{out}");
}

#[test]
fn committed_configs_parse_and_round_trip() {
    for entry in fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::parse(&fs::read_to_string(&path).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg, "{}", path.display());
    }
}
