//! Experiment configuration: one TOML file describing the network, training,
//! loss, decoding, evaluation and data source of a run.
//!
//! ```toml
//! schema_version = 1
//! output_dir = "runs/toy"
//!
//! [network]
//! backbone_channels = [8, 16, 32, 64]
//! fusion_kind = "cwf"
//!
//! [train]
//! lr0 = 0.002
//! max_iters = 2000
//!
//! [data]
//! source = "synthetic"
//! seed = 7
//! train_count = 256
//! test_count = 64
//! ```
//!
//! Every section and field is optional and falls back to its default; unknown
//! fields are rejected. Dotted overrides (`train.lr0=0.001`) are applied to
//! the parsed document before it is interpreted, so they obey the same
//! schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::DecodeSpec;
use crate::evalkit::EvalSpec;
use crate::loss::LossWeights;
use crate::maps::SynthSpec;
use crate::net::NetworkSpec;
use crate::trainer::TrainSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the root that relative output directories are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "SIFCN_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("override {0:?} is not of the form key.path=value")]
    Override(String),
}

impl ConfigError {
    fn field(field: impl Into<String>, message: impl ToString) -> Self {
        ConfigError::Field { field: field.into(), message: message.to_string() }
    }
}

/// Where training and test samples come from; `source` defaults to
/// `"synthetic"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    /// Scenes generated on the fly; sample `i` of a split has a fixed seed
    /// derived from `seed`, so generated datasets and in-memory data agree.
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_train_count")]
        train_count: usize,
        #[serde(default = "default_test_count")]
        test_count: usize,
        #[serde(default)]
        synth: SynthSpec,
    },
    /// Datasets on disk in the manifest layout of [`crate::maps::dataset`].
    Dataset { train_dir: PathBuf, test_dir: PathBuf },
}

fn default_train_count() -> usize {
    256
}

fn default_test_count() -> usize {
    64
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic { seed: 0, train_count: default_train_count(), test_count: default_test_count(), synth: SynthSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Test seeds start this far above train seeds so the splits never share a
/// scene.
const TEST_SEED_OFFSET: u64 = 1 << 40;

/// Generator seed of sample `index` of a synthetic split.
pub fn sample_seed(data_seed: u64, split: Split, index: usize) -> u64 {
    let base = match split {
        Split::Train => data_seed,
        Split::Test => data_seed.wrapping_add(TEST_SEED_OFFSET),
    };
    base.wrapping_add(index as u64)
}

/// Identifier of sample `index` of a synthetic split.
pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}-{index:06}", split.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub decode: DecodeSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub data: DataSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            output_dir: default_output_dir(),
            network: NetworkSpec::default(),
            train: TrainSpec::default(),
            loss: LossWeights::default(),
            decode: DecodeSpec::default(),
            eval: EvalSpec::default(),
            data: DataSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config document, applying `overrides` first.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(toml::Value::Table(data)) = doc.get_mut("data") {
            data.entry("source").or_insert_with(|| toml::Value::String("synthetic".into()));
        }
        let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks every section and the constraints between them.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::field("schema_version", format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version)));
        }
        self.network.validate().map_err(|e| ConfigError::field("network", e))?;
        self.train.validate().map_err(|e| ConfigError::field("train", e))?;
        self.loss.validate().map_err(|e| ConfigError::field("loss", e))?;
        self.decode.validate().map_err(|e| ConfigError::field("decode", e))?;
        self.eval.validate().map_err(|e| ConfigError::field("eval", e))?;
        if self.train.input_size != self.network.input_size {
            return Err(ConfigError::field(
                "train.input_size",
                format!("{} differs from network.input_size {}", self.train.input_size, self.network.input_size),
            ));
        }
        if let Some(s) = self.loss.scale_set.iter().find(|s| !self.network.head_scales.contains(s)) {
            return Err(ConfigError::field("loss.scale_set", format!("scale {s} is not in network.head_scales")));
        }
        match &self.data {
            DataSpec::Synthetic { synth, .. } => {
                synth.validate().map_err(|e| ConfigError::field("data.synth", e))?;
                if synth.image_size != self.network.input_size {
                    return Err(ConfigError::field(
                        "data.synth.image_size",
                        format!("{} differs from network.input_size {}", synth.image_size, self.network.input_size),
                    ));
                }
            }
            DataSpec::Dataset { train_dir, test_dir } => {
                for (field, dir) in [("data.train_dir", train_dir), ("data.test_dir", test_dir)] {
                    if dir.as_os_str().is_empty() {
                        return Err(ConfigError::field(field, "must not be empty"));
                    }
                }
            }
        }
        Ok(())
    }

    /// The output directory, resolved against `root` when relative.
    pub fn resolved_output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.output_dir.is_relative() => r.join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Sets `a.b.c = value` in a TOML table; the value is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::field(key.trim(), format!("`{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
