//! Run configuration: a TOML document with `--set key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gcpool::data::{gen_cov_task, load_mnist, read_cifar10_bin, Dataset, Split, SyntheticCovTaskSpec};
use gcpool::net::{Architecture, HeadKind, Network, Tensor};
use gcpool::optim::ScheduleSpec;
use gcpool::train::{ProbeOptions, TrainOptions};
use serde::{Deserialize, Serialize};

/// Invalid configuration; maps to exit status 1.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for p in &self.0 {
            write!(f, "\n  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticCovTaskSpec),
    Mnist { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
    Cifar10 { train: Vec<PathBuf>, test: PathBuf },
    /// Containers written by `gcpool gen-data`.
    Saved { train: PathBuf, test: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticCovTaskSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleConfig {
    Preset { preset: String },
    Spec(ScheduleSpec),
}

impl ScheduleConfig {
    pub fn resolve(&self) -> Result<ScheduleSpec, String> {
        let spec = match self {
            ScheduleConfig::Preset { preset } => ScheduleSpec::preset(preset).ok_or_else(|| {
                format!("unknown preset '{preset}', expected one of {}", ScheduleSpec::PRESETS.join(", "))
            })?,
            ScheduleConfig::Spec(s) => s.clone(),
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed of the synthetic dataset, kept apart from `seed` so paired runs
    /// can share data.
    pub data_seed: u64,
    pub out: PathBuf,
    /// Worker threads for probe grids and robustness cells; 0 = all cores.
    pub threads: usize,
    /// Forces a single worker thread.
    pub deterministic: bool,
    pub head: HeadKind,
    pub epochs: u32,
    /// Stop after this many steps; 0 means no cap.
    pub max_steps: u64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dataset: DatasetConfig,
    pub architecture: Architecture,
    pub schedule: ScheduleConfig,
    pub probe: ProbeOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 1,
            out: PathBuf::from("runs/default"),
            threads: 0,
            deterministic: false,
            head: HeadKind::Gcp,
            epochs: 20,
            max_steps: 0,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
            dataset: DatasetConfig::default(),
            architecture: Architecture::default(),
            schedule: ScheduleConfig::Spec(ScheduleSpec::Polynomial { l0: 0.05, e_s: 0, e_f: 20, rho: 2.0 }),
            probe: ProbeOptions::default(),
        }
    }
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override '{assignment}' is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| format!("override '{key}': '{p}' is not a table"))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or the defaults) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError(vec![format!("{}: {e}", p.display())]))?
            }
            None => toml::Table::new(),
        };
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(e) = apply_override(&mut doc, o) {
                problems.push(e);
            }
        }
        if !problems.is_empty() {
            return Err(ConfigError(problems).into());
        }
        // a partial dataset table refers to the default synthetic task
        if let Some(toml::Value::Table(d)) = doc.get_mut("dataset") {
            d.entry("kind").or_insert_with(|| "synthetic".into());
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| ConfigError(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(e) = self.schedule.resolve() {
            problems.push(format!("schedule: {e}"));
        }
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            if let Err(e) = spec.validate() {
                problems.push(format!("dataset: {e}"));
            }
        }
        match self.architecture {
            Architecture::Toy { reduce_dim } | Architecture::Linear { reduce_dim } if reduce_dim == 0 => {
                problems.push("architecture.reduce_dim: must be at least 1".into());
            }
            _ => {}
        }
        // field checks run even when the schedule is broken
        let schedule = self.schedule.resolve().unwrap_or(ScheduleSpec::Exponential { l0: 0.0, base: 1.0 });
        let opts = self.options_with(schedule, true);
        if let Err(e) = opts.validate() {
            problems.extend(e.to_string().trim_start_matches("domain error: ").split("; ").map(String::from));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(problems))
        }
    }

    pub fn train_options(&self, with_probes: bool) -> Result<TrainOptions, ConfigError> {
        let schedule = self.schedule.resolve().map_err(|e| ConfigError(vec![format!("schedule: {e}")]))?;
        Ok(self.options_with(schedule, with_probes))
    }

    fn options_with(&self, schedule: ScheduleSpec, with_probes: bool) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            batch_size: self.batch_size,
            schedule,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            probe: with_probes.then(|| self.probe.clone()),
        }
    }

    /// The configuration with every default made explicit, as persisted
    /// into the run directory.
    pub fn resolved(&self, net: &Network) -> Result<RunConfig> {
        let mut cfg = self.clone();
        cfg.schedule = ScheduleConfig::Spec(self.schedule.resolve().map_err(|e| ConfigError(vec![e]))?);
        if cfg.probe.layer.is_none() {
            cfg.probe.layer = net.first_conv();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn thread_count(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads
        }
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        Ok(match &self.dataset {
            DatasetConfig::Synthetic(spec) => {
                let task = gen_cov_task(spec, self.data_seed)?;
                (task.train, task.test)
            }
            DatasetConfig::Mnist { train_images, train_labels, test_images, test_labels } => (
                load_mnist(train_images, train_labels, Split::Train)?,
                load_mnist(test_images, test_labels, Split::Test)?,
            ),
            DatasetConfig::Cifar10 { train, test } => {
                let parts = train
                    .iter()
                    .map(|p| read_cifar10_bin(p).with_context(|| format!("reading {}", p.display())))
                    .collect::<Result<Vec<_>>>()?;
                let mut train = concat(parts)?;
                train.split = Split::Train;
                let mut test = read_cifar10_bin(test).with_context(|| format!("reading {}", test.display()))?;
                test.split = Split::Test;
                (train, test)
            }
            DatasetConfig::Saved { train, test } => (
                Dataset::load(train).with_context(|| format!("reading {}", train.display()))?,
                Dataset::load(test).with_context(|| format!("reading {}", test.display()))?,
            ),
        })
    }

    pub fn build_network(&self, train: &Dataset) -> Result<Network> {
        Ok(Network::from_architecture(self.architecture, train.shape(), train.classes, self.head, self.seed)?)
    }
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut iter = parts.into_iter();
    let mut first = iter.next().ok_or_else(|| ConfigError(vec!["dataset.train: no files listed".into()]))?;
    for ds in iter {
        first.images.data.extend(ds.images.data);
        first.images.batch += ds.images.batch;
        first.labels.extend(ds.labels);
    }
    let images = Tensor::new(first.images.batch, first.images.shape, first.images.data)?;
    Ok(Dataset::new(images, first.labels, first.classes, first.split, first.normalization)?)
}
