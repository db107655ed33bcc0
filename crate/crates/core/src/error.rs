use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // params
    #[error("cannot aggregate an empty list of parameter vectors")]
    EmptyAggregate,
    #[error("parameter layout mismatch: expected {expected} ({expected_len} values), got {found} ({found_len} values)")]
    LayoutMismatch {
        expected: String,
        expected_len: usize,
        found: String,
        found_len: usize,
    },
    #[error("total aggregation weight is zero")]
    ZeroTotalWeight,
    #[error("invalid parameter vector: {0}")]
    InvalidParams(String),
    #[error("malformed encoding: {0}")]
    Decode(String),

    // data
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("record count mismatch: {images} has {image_count} images, {labels} has {label_count} labels")]
    CountMismatch {
        images: PathBuf,
        labels: PathBuf,
        image_count: usize,
        label_count: usize,
    },
    #[error("{path}: size {size} is not a multiple of the {record} byte record size")]
    RecordSize {
        path: PathBuf,
        size: u64,
        record: usize,
    },
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    // partition
    #[error("invalid partition spec: {0}")]
    InvalidPartitionSpec(String),
    #[error("client {client} would hold only {size} samples (minimum 4)")]
    ClientTooSmall { client: usize, size: usize },

    // model / strategies / metrics
    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no results to aggregate")]
    NoResults,
    #[error("invalid strategy configuration: {0}")]
    InvalidStrategy(String),
    #[error("invalid confusion matrix: {0}")]
    InvalidConfusion(String),

    // protocol
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("round {round} failed: no fit results received within the round timeout")]
    RoundFailed { round: u32 },
    #[error("connection to {addr} refused after {attempts} attempts")]
    ConnectRefused { addr: String, attempts: u32 },
    #[error("shut down before completion")]
    Shutdown,
    #[error("invalid server configuration: {0}")]
    InvalidServerConfig(String),

    // storage
    #[error("corrupt experiment config {path}: {source}")]
    CorruptConfig {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("storage error: {0}")]
    Storage(String),
    #[error("i/o error on {path}: {source}")]
    PathIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::PathIo {
            path: path.into(),
            source,
        })
    }
}
