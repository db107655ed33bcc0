//! The `config.json` document (schema version 1).
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "experiment_name": "exp1",
//!   "dataset": { "name": "fmnist" },
//!   "partition": { "num_clients": 10, "balance": false, "non_iid": true,
//!                  "distribution": "dir:0.1", "seed": 1 },
//!   "distribution": { "num_classes": 10, "clients": [ ... ] },
//!   "model": { "kind": "mlp", "input_dim": 784, "num_classes": 10,
//!              "hidden_dim": 64, "init_seed": 2 },
//!   "fl_strategy": { "kind": "fedopt", "server_lr": 1.0, "momentum": 0.9,
//!                    "beta1": 0.9, "beta2": 0.99, "tau": 0.001 },
//!   "rounds": 10,
//!   "local_epochs": 10,
//!   "train": { "batch_size": 32, "learning_rate": 0.01 },
//!   "seeds": { "training": 3, "sampling": 4 },
//!   "server": { "listen_address": "127.0.0.1:8080", "min_available_clients": 10,
//!               "fraction_fit": 1.0, "round_timeout_secs": 300.0 }
//! }
//! ```
//!
//! `distribution` is written by the harness after partitioning. A model
//! `input_dim` or `num_classes` of 0 is filled in from the dataset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, DatasetName};
use crate::error::{Error, IoContext, Result};
use crate::model::{ModelKind, ModelSpec, DEFAULT_BATCH_SIZE, DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE};
use crate::partition::{DistributionRecord, PartitionSpec};
use crate::strategies::StrategyConfig;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ROUND_TIMEOUT_SECS: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: DatasetName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticParams>,
}

impl DatasetConfig {
    pub fn named(name: DatasetName) -> Self {
        Self { name, synthetic: None }
    }

    pub fn synthetic(params: SyntheticParams) -> Self {
        Self {
            name: DatasetName::Synthetic,
            synthetic: Some(params),
        }
    }

    /// `(feature_dim, num_classes)` without loading anything.
    pub fn dims(&self) -> Result<(usize, usize)> {
        match self.name {
            DatasetName::Fmnist => Ok((784, 10)),
            DatasetName::Cifar10 => Ok((data::CIFAR_PIXELS, 10)),
            DatasetName::Cifar100 => Ok((data::CIFAR_PIXELS, 100)),
            DatasetName::Synthetic => self
                .synthetic
                .as_ref()
                .map(|s| (s.feature_dim, s.num_classes))
                .ok_or_else(|| Error::InvalidDataset("synthetic dataset needs a \"synthetic\" section".into())),
        }
    }

    /// Loads (or generates) the pooled dataset. `data_root` is ignored for
    /// synthetic data.
    pub fn load(&self, data_root: Option<&Path>) -> Result<Dataset> {
        match (self.name, &self.synthetic) {
            (DatasetName::Synthetic, Some(s)) => {
                data::make_synthetic(s.num_classes, s.samples_per_class, s.feature_dim, s.seed)
            }
            (DatasetName::Synthetic, None) => Err(Error::InvalidDataset("synthetic dataset needs parameters".into())),
            (name, _) => {
                let root = data_root.ok_or_else(|| {
                    Error::InvalidDataset(format!("{name} needs a data directory (--data-dir or FH_DATA_DIR)"))
                })?;
                data::load_named(root, name)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Base of the per-client, per-round shuffle seeds.
    pub training: u64,
    /// Client sampling each round.
    pub sampling: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerSettings {
    pub listen_address: String,
    pub min_available_clients: usize,
    pub fraction_fit: f64,
    pub round_timeout_secs: f64,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            listen_address: "127.0.0.1:8080".into(),
            min_available_clients: 1,
            fraction_fit: 1.0,
            round_timeout_secs: DEFAULT_ROUND_TIMEOUT_SECS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment_name: String,
    pub dataset: DatasetConfig,
    pub partition: PartitionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionRecord>,
    pub model: ModelSpec,
    pub fl_strategy: StrategyConfig,
    pub rounds: u32,
    pub local_epochs: usize,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub server: ServerSettings,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_json(&text).map_err(|source| Error::CorruptConfig {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills model dimensions from the dataset and checks consistency.
    pub fn resolve(&mut self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Storage(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let (dim, classes) = self.dataset.dims()?;
        if self.model.input_dim == 0 {
            self.model.input_dim = dim;
        }
        if self.model.num_classes == 0 {
            self.model.num_classes = classes;
        }
        match self.model.kind {
            ModelKind::Logreg => self.model.hidden_dim = 0,
            ModelKind::Mlp if self.model.hidden_dim == 0 => self.model.hidden_dim = DEFAULT_HIDDEN,
            ModelKind::Mlp => {}
        }
        if (self.model.input_dim, self.model.num_classes) != (dim, classes) {
            return Err(Error::InvalidModelSpec(format!(
                "model expects {}x{} but dataset {} is {dim}x{classes}",
                self.model.input_dim, self.model.num_classes, self.dataset.name
            )));
        }
        self.model.validate()?;
        self.fl_strategy.validate()?;
        self.partition.validate(classes)?;
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::InvalidServerConfig("rounds and local_epochs must be positive".into()));
        }
        let server = &self.server;
        if server.min_available_clients == 0
            || !(server.fraction_fit > 0.0 && server.fraction_fit <= 1.0)
            || !(server.round_timeout_secs > 0.0 && server.round_timeout_secs.is_finite())
        {
            return Err(Error::InvalidServerConfig(format!(
                "min_available_clients >= 1, fraction_fit in (0, 1] and round_timeout_secs > 0 required, got {server:?}"
            )));
        }
        if self.experiment_name.is_empty() || self.experiment_name.contains(['/', '\\']) {
            return Err(Error::Storage(format!("invalid experiment name {:?}", self.experiment_name)));
        }
        Ok(())
    }

    /// Sets every seed from one master seed.
    pub fn reseed(&mut self, master: u64) {
        self.partition.seed = derive_seed(master, 1);
        self.model.init_seed = derive_seed(master, 2);
        self.seeds.training = derive_seed(master, 3);
        self.seeds.sampling = derive_seed(master, 4);
    }

    /// Whether data batches built for `self` can be reused for `other`.
    pub fn same_data_as(&self, other: &Self) -> bool {
        self.dataset == other.dataset && self.partition == other.partition
    }
}

/// SplitMix64 finaliser over `(base, stream)`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
