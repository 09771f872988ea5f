//! Experiment configuration: one TOML file describing the network, the
//! optimiser, the data source, augmentation, dropout and the output folder.
//!
//! ```toml
//! output_dir = "runs/wrn-synth"
//! precision = "f32"
//!
//! [network]
//! preset = "wrn-micro"
//!
//! [train]
//! epochs = 40
//! seed = 0
//!
//! [data]
//! normalization = "standardize"
//! [data.synth]
//! test_n = 1000
//! label_noise = 0.2
//! [data.synth.params]
//! n = 2000
//! size = 8
//!
//! [[drop.default]]
//! level = "channel"
//! rate = 0.1
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use convdrop::data::{
    corrupt_labels, read_cifar_binary, standardize, synth_dataset, AugmentPolicy, Dataset, Normalization, SynthParams,
    CIFAR_CLASSES,
};
use convdrop::trainer::TrainConfig;
use convdrop::{DropSpec, NetworkSpec, StageSpec, StemSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Network description: an optional preset plus field overrides. Without a
/// preset the network starts empty (no stem, no stages). Input geometry and
/// class count default to those of the data source.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<StemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarSource {
    /// CIFAR-10 binary batch (or concatenation of batches) for training.
    pub train: PathBuf,
    pub test: PathBuf,
    /// Keep only the first `limit` training records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

/// Synthetic data: `params.n` training images followed by `test_n` test
/// images drawn from the same generator. `label_noise` relabels that
/// fraction of the *training* images with a wrong class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub test_n: usize,
    #[serde(default)]
    pub label_noise: f64,
    pub params: SynthParams,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cifar: Option<CifarSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSource>,
}

/// Dropout for the whole network plus per-stage replacements keyed by the
/// stage index (`"0"`, `"1"`, ...).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropSection {
    #[serde(default)]
    pub default: Vec<DropSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stages: BTreeMap<String, Vec<DropSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub drop: DropSection,
}

/// Training and test splits after normalisation.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn invalid(field: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {e}"))
}

impl ExperimentConfig {
    /// Parse and validate the structure of a config; paths are not touched.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, parse and validate a config file, checking that every
    /// referenced data file exists.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(c) = &cfg.data.cifar {
            for (field, p) in [("data.cifar.train", &c.train), ("data.cifar.test", &c.test)] {
                if !p.is_file() {
                    return Err(invalid(field, format!("file {} does not exist", p.display())));
                }
            }
        }
        Ok(cfg)
    }

    /// Canonical serialisation; `parse(to_toml())` reproduces `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.data.cifar, &self.data.synth) {
            (Some(_), Some(_)) => return Err(invalid("data", "set exactly one of [data.cifar] and [data.synth], not both")),
            (None, None) => return Err(invalid("data", "missing data source: add [data.cifar] or [data.synth]")),
            _ => {}
        }
        if let Some(s) = &self.data.synth {
            if s.params.n == 0 || s.test_n == 0 {
                return Err(invalid("data.synth", "params.n and test_n must be positive"));
            }
            if !(0.0..=1.0).contains(&s.label_noise) {
                return Err(invalid("data.synth.label_noise", "must lie in [0, 1]"));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        self.train.validate().map_err(|e| invalid("train", e))?;
        let (_, size, _) = self.data_geometry();
        self.augment.validate(size).map_err(|e| invalid("augment", e))?;
        for d in self.drop.default.iter().chain(self.drop.stages.values().flatten()) {
            d.validate().map_err(|e| invalid("drop", e))?;
        }
        self.network_spec()?;
        Ok(())
    }

    /// `(channels, side, classes)` of the configured data source.
    pub fn data_geometry(&self) -> (usize, usize, usize) {
        match (&self.data.cifar, &self.data.synth) {
            (_, Some(s)) => (s.params.channels, s.params.size, s.params.classes),
            _ => (3, 32, CIFAR_CLASSES),
        }
    }

    /// Resolve the network: preset, then overrides, then dropout.
    pub fn network_spec(&self) -> Result<NetworkSpec, CliError> {
        let n = &self.network;
        let (channels, size, classes) = self.data_geometry();
        let mut spec = match &n.preset {
            Some(name) => NetworkSpec::preset(name).map_err(|e| invalid("network.preset", e))?,
            None => NetworkSpec {
                input_channels: channels,
                input_size: size,
                stem: None,
                stages: Vec::new(),
                num_classes: classes,
                drops: Vec::new(),
            },
        };
        spec.input_channels = n.input_channels.unwrap_or(channels);
        spec.input_size = n.input_size.unwrap_or(size);
        spec.num_classes = n.num_classes.unwrap_or(classes);
        if let Some(stem) = &n.stem {
            spec.stem = Some(stem.clone());
        }
        if let Some(stages) = &n.stages {
            spec.stages = stages.clone();
        }
        spec.drops = self.drop.default.clone();
        let stage_count = spec.stages.len();
        for (key, drops) in &self.drop.stages {
            let idx: usize = key
                .parse()
                .map_err(|_| invalid(&format!("drop.stages.{key}"), "stage keys must be indices"))?;
            let stage = spec.stages.get_mut(idx).ok_or_else(|| {
                invalid(&format!("drop.stages.{key}"), format!("network has {stage_count} stages"))
            })?;
            stage.drops = Some(drops.clone());
        }
        spec.validate().map_err(|e| invalid("network", e))?;
        Ok(spec)
    }

    /// Load (or generate) both splits and normalise them with training
    /// statistics.
    pub fn load_data(&self) -> Result<Splits, CliError> {
        let (mut train, mut test) = match (&self.data.cifar, &self.data.synth) {
            (Some(c), _) => {
                let read = |p: &Path, limit: Option<usize>| -> Result<Dataset, CliError> {
                    let ds = read_cifar_binary(p).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?;
                    let n = limit.unwrap_or(ds.len()).min(ds.len());
                    ds.slice(0, n).map_err(CliError::from)
                };
                (read(&c.train, c.limit)?, read(&c.test, c.test_limit)?)
            }
            (None, Some(s)) => {
                let all = synth_dataset(&SynthParams {
                    n: s.params.n + s.test_n,
                    ..s.params.clone()
                })?;
                let mut train = all.slice(0, s.params.n)?;
                corrupt_labels(&mut train, s.label_noise, s.params.seed)?;
                (train, all.slice(s.params.n, s.params.n + s.test_n)?)
            }
            (None, None) => return Err(invalid("data", "missing data source")),
        };
        if self.data.normalization == Normalization::Standardize {
            standardize(&mut train, &mut [&mut test], Normalization::Standardize)?;
        }
        Ok(Splits { train, test })
    }
}
