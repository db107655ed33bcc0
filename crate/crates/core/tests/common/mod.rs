#![allow(dead_code)]

use std::path::Path;

use fedharness::model::ModelSpec;
use fedharness::partition::PartitionSpec;
use fedharness::storage::{
    DatasetConfig, Experiment, ExperimentConfig, Seeds, ServerSettings, SyntheticParams, TrainSettings, SCHEMA_VERSION,
};
use fedharness::strategies::{StrategyConfig, StrategyKind};

/// Synthetic blobs, IID balanced, logreg.
pub fn synthetic_config(name: &str, clients: usize, classes: usize, per_class: usize, dim: usize) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment_name: name.into(),
        dataset: DatasetConfig::synthetic(SyntheticParams {
            num_classes: classes,
            samples_per_class: per_class,
            feature_dim: dim,
            seed: 11,
        }),
        partition: PartitionSpec::iid(clients, true, 5),
        distribution: None,
        model: ModelSpec::logreg(dim, classes, 3),
        fl_strategy: StrategyConfig::new(StrategyKind::FedAvg),
        rounds: 2,
        local_epochs: 1,
        train: TrainSettings {
            batch_size: 16,
            learning_rate: 0.1,
        },
        seeds: Seeds {
            training: 21,
            sampling: 22,
        },
        server: ServerSettings {
            round_timeout_secs: 30.0,
            ..ServerSettings::default()
        },
    }
}

pub fn init(root: &Path, cfg: ExperimentConfig) -> Experiment {
    let data = cfg.clone();
    Experiment::init(root, cfg, move || data.dataset.load(None)).unwrap().0
}
