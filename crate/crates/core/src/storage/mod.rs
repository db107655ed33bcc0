//! Experiment directory lifecycle.
//!
//! ```text
//! <root>/<experiment>/
//!   .temp/            current run: logs/ and results/, promoted on finalize
//!   data/client-<i>/  train and test batch files
//!   runs/run-<id>/    finalized runs: logs/, results/, config.json
//!   config.json       last configuration used
//! ```
//!
//! Logs are JSON lines, one record per line, each appended and synced
//! before the append call returns.

mod batch;
mod config;
mod report;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use batch::{read_batch, write_batch, BATCH_MAGIC};
pub use config::{
    derive_seed, DatasetConfig, ExperimentConfig, Seeds, ServerSettings, SyntheticParams, TrainSettings,
    DEFAULT_ROUND_TIMEOUT_SECS, SCHEMA_VERSION,
};
pub use report::{render_report, verify_run, ReportSummary};

use crate::data::Dataset;
use crate::error::{Error, IoContext, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::partition::{self, PartitionResult};

pub const TEMP_DIR: &str = ".temp";
pub const DATA_DIR: &str = "data";
pub const RUNS_DIR: &str = "runs";
pub const CONFIG_FILE: &str = "config.json";
pub const LOGS_DIR: &str = "logs";
pub const RESULTS_DIR: &str = "results";
pub const SERVER_LOG: &str = "server.jsonl";

/// One local-epoch evaluation on a client's test batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub client_id: u32,
    pub round: u32,
    pub epoch: u32,
    pub test_loss: f64,
    pub num_test: u64,
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundStatus {
    Ok,
    Failed,
}

/// One server round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub status: RoundStatus,
    pub sampled: Vec<u32>,
    /// Clients whose fit results were aggregated, ascending.
    pub participants: Vec<u32>,
    pub eval_participants: Vec<u32>,
    pub loss_distributed: Option<f64>,
    pub accuracy_distributed: Option<f64>,
    /// Fit results that arrived for an earlier round and were dropped.
    pub discarded_stale: u32,
    /// SHA-256 of the serialized global parameters after this round.
    pub params_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitOutcome {
    pub repartitioned: bool,
}

/// Handle to an experiment directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    path: PathBuf,
    config: ExperimentConfig,
}

pub fn client_log_name(client_id: u32) -> String {
    format!("client-{client_id}.jsonl")
}

fn client_data_dir(path: &Path, client: usize) -> PathBuf {
    path.join(DATA_DIR).join(format!("client-{client}"))
}

impl Experiment {
    /// Creates or reopens `<root>/<name>`. The dataset is loaded (through
    /// `load_dataset`) and repartitioned only when the stored dataset or
    /// partition section differs from `cfg` or the data batches are missing.
    pub fn init<F>(root: &Path, mut cfg: ExperimentConfig, load_dataset: F) -> Result<(Self, InitOutcome)>
    where
        F: FnOnce() -> Result<Dataset>,
    {
        cfg.resolve()?;
        let path = root.join(&cfg.experiment_name);
        for dir in [TEMP_DIR, DATA_DIR, RUNS_DIR] {
            fs::create_dir_all(path.join(dir)).at(path.join(dir))?;
        }
        let config_path = path.join(CONFIG_FILE);
        let existing = if config_path.exists() {
            Some(ExperimentConfig::read(&config_path)?)
        } else {
            None
        };
        let reusable = existing.as_ref().filter(|old| {
            old.same_data_as(&cfg)
                && old.distribution.is_some()
                && (0..cfg.partition.num_clients).all(|i| {
                    let dir = client_data_dir(&path, i);
                    dir.join("train").is_file() && dir.join("test").is_file()
                })
        });

        let repartitioned = match reusable {
            Some(old) => {
                cfg.distribution = old.distribution.clone();
                false
            }
            None => {
                let dataset = load_dataset()?;
                let (feature_dim, classes) = cfg.dataset.dims()?;
                if dataset.num_classes() != classes || crate::data::Batch::feature_dim(&dataset) != feature_dim {
                    return Err(Error::InvalidDataset(format!(
                        "loaded dataset does not match the configured {} dimensions",
                        cfg.dataset.name
                    )));
                }
                let result = partition::partition(&dataset, &cfg.partition)?;
                write_client_batches(&path, &dataset, &result)?;
                cfg.distribution = Some(partition::describe(&result));
                true
            }
        };
        write_atomically(&config_path, cfg.to_json().as_bytes())?;
        Ok((Self { path, config: cfg }, InitOutcome { repartitioned }))
    }

    /// Opens an initialized experiment.
    pub fn open(path: &Path) -> Result<Self> {
        let config = ExperimentConfig::read(&path.join(CONFIG_FILE))?;
        Ok(Self {
            path: path.to_path_buf(),
            config,
        })
    }

    /// Polls until the server has written `config.json` and the data batches.
    pub fn wait_for(path: &Path, poll: Duration, timeout: Option<Duration>) -> Result<Self> {
        let start = Instant::now();
        loop {
            if path.join(CONFIG_FILE).is_file() {
                let exp = Self::open(path)?;
                if exp.config.distribution.is_some() {
                    return Ok(exp);
                }
            }
            if timeout.is_some_and(|t| start.elapsed() >= t) {
                return Err(Error::Storage(format!("{} was not initialized in time", path.display())));
            }
            std::thread::sleep(poll);
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn temp_dir(&self) -> PathBuf {
        self.path.join(TEMP_DIR)
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.path.join(RUNS_DIR)
    }

    pub fn temp_logs(&self) -> PathBuf {
        self.temp_dir().join(LOGS_DIR)
    }

    pub fn temp_results(&self) -> PathBuf {
        self.temp_dir().join(RESULTS_DIR)
    }

    /// Loads client `client`'s train and test batches.
    pub fn client_data(&self, client: usize) -> Result<(Dataset, Dataset)> {
        let dir = client_data_dir(&self.path, client);
        Ok((read_batch(&dir.join("train"))?.1, read_batch(&dir.join("test"))?.1))
    }

    /// Prepares `.temp` for a new run. Leftovers from an interrupted run are
    /// preserved under `runs/aborted-<n>`.
    pub fn begin_run(&self) -> Result<()> {
        let temp = self.temp_dir();
        fs::create_dir_all(&temp).at(&temp)?;
        if fs::read_dir(&temp).at(&temp)?.next().is_some() {
            let runs = self.runs_dir();
            let n = (0..).find(|n| !runs.join(format!("aborted-{n}")).exists()).unwrap();
            let dest = runs.join(format!("aborted-{n}"));
            log::warn!("preserving interrupted run in {}", dest.display());
            fs::rename(&temp, &dest).at(&temp)?;
            fs::create_dir(&temp).at(&temp)?;
        }
        self.ensure_temp_layout()
    }

    fn ensure_temp_layout(&self) -> Result<()> {
        for dir in [self.temp_logs(), self.temp_results()] {
            fs::create_dir_all(&dir).at(&dir)?;
        }
        Ok(())
    }

    pub fn append_epoch_record(&self, record: &EpochRecord) -> Result<()> {
        append_line(&self.temp_results().join(client_log_name(record.client_id)), record)
    }

    pub fn append_round_record(&self, record: &RoundRecord) -> Result<()> {
        append_line(&self.temp_logs().join(SERVER_LOG), record)
    }

    /// Promotes `.temp` to `runs/run-<id>` with a snapshot of `config.json`
    /// in a single rename; `.temp` is left empty. On failure `.temp` keeps
    /// its contents.
    pub fn finalize_run(&self) -> Result<u64> {
        let temp = self.temp_dir();
        self.ensure_temp_layout()?;
        let snapshot = fs::read(self.path.join(CONFIG_FILE)).at(self.path.join(CONFIG_FILE))?;
        write_atomically(&temp.join(CONFIG_FILE), &snapshot)?;
        let id = next_run_id(&self.runs_dir())?;
        let dest = self.run_dir(id);
        fs::rename(&temp, &dest).at(&dest)?;
        fs::create_dir(&temp).at(&temp)?;
        Ok(id)
    }

    pub fn run_dir(&self, id: u64) -> PathBuf {
        self.runs_dir().join(format!("run-{id}"))
    }
}

/// `max(existing run ids) + 1`, or 0 for the first run.
pub fn next_run_id(runs: &Path) -> Result<u64> {
    let mut next = 0;
    if runs.exists() {
        for entry in fs::read_dir(runs).at(runs)? {
            let name = entry?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_prefix("run-")).and_then(|n| n.parse::<u64>().ok()) {
                next = next.max(id + 1);
            }
        }
    }
    Ok(next)
}

fn write_client_batches(path: &Path, dataset: &Dataset, result: &PartitionResult) -> Result<()> {
    let data = path.join(DATA_DIR);
    if data.exists() {
        fs::remove_dir_all(&data).at(&data)?;
    }
    for (i, split) in result.clients.iter().enumerate() {
        let dir = client_data_dir(path, i);
        fs::create_dir_all(&dir).at(&dir)?;
        write_batch(&dir.join("train"), dataset, &split.train)?;
        write_batch(&dir.join("test"), dataset, &split.test)?;
    }
    Ok(())
}

pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    fs::rename(&tmp, path).at(path)
}

/// Appends one JSON line and syncs it to disk.
pub fn append_line<R: Serialize>(path: &Path, record: &R) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    f.write_all(&line).at(path)?;
    f.sync_data().at(path)
}

/// Reads a JSON-lines log. Lines that fail to parse (typically a partial
/// trailing line after a crash) are skipped and counted.
pub fn read_lines<R: DeserializeOwned>(path: &Path) -> Result<(Vec<R>, usize)> {
    let f = File::open(path).at(path)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{}:{}: skipping malformed record: {e}", path.display(), n + 1);
                skipped += 1;
            }
        }
    }
    Ok((records, skipped))
}

#[cfg(test)]
mod tests {
    use super::config::tests::sample;
    use super::*;
    use crate::metrics;
    use crate::partition::Distribution;

    fn load(cfg: &ExperimentConfig) -> impl FnOnce() -> Result<Dataset> + '_ {
        move || cfg.dataset.load(None)
    }

    fn epoch(client_id: u32, round: u32, epoch: u32) -> EpochRecord {
        let confusion = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap();
        EpochRecord {
            client_id,
            round,
            epoch,
            test_loss: 0.5,
            num_test: confusion.total(),
            metrics: metrics::compute(&confusion).unwrap(),
            confusion,
        }
    }

    fn round(r: u32) -> RoundRecord {
        RoundRecord {
            round: r,
            status: RoundStatus::Ok,
            sampled: vec![0, 1],
            participants: vec![0, 1],
            eval_participants: vec![0, 1],
            loss_distributed: Some(0.7),
            accuracy_distributed: Some(0.6),
            discarded_stale: 0,
            params_sha256: "00".into(),
        }
    }

    #[test]
    fn fresh_init_creates_layout() {
        let root = tempfile::tempdir().unwrap();
        let cfg = sample();
        let (exp, outcome) = Experiment::init(root.path(), cfg.clone(), load(&cfg)).unwrap();
        assert!(outcome.repartitioned);
        let mut entries: Vec<String> = fs::read_dir(exp.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        entries.sort();
        assert_eq!(entries, vec![".temp", "config.json", "data", "runs"]);
        assert_eq!(fs::read_dir(exp.runs_dir()).unwrap().count(), 0);
        let (train, test) = exp.client_data(0).unwrap();
        let rec = &exp.config().distribution.as_ref().unwrap().clients[0];
        assert_eq!(crate::data::Batch::len(&train), rec.train_size);
        assert_eq!(crate::data::Batch::len(&test), rec.test_size);
    }

    #[test]
    fn identical_reinit_reuses_data() {
        let root = tempfile::tempdir().unwrap();
        let cfg = sample();
        let (exp, _) = Experiment::init(root.path(), cfg.clone(), load(&cfg)).unwrap();
        let train = exp.path().join("data/client-0/train");
        let before = fs::metadata(&train).unwrap().modified().unwrap();
        std::thread::sleep(Duration::from_millis(20));
        let (_, outcome) = Experiment::init(root.path(), cfg, || panic!("must not reload")).unwrap();
        assert!(!outcome.repartitioned);
        assert_eq!(fs::metadata(&train).unwrap().modified().unwrap(), before);
    }

    #[test]
    fn changed_alpha_repartitions() {
        let root = tempfile::tempdir().unwrap();
        let cfg = sample();
        let (first, _) = Experiment::init(root.path(), cfg.clone(), load(&cfg)).unwrap();
        let mut changed = cfg.clone();
        changed.partition.distribution = Distribution::Dirichlet { alpha: 50.0 };
        let (second, outcome) = Experiment::init(root.path(), changed.clone(), load(&changed)).unwrap();
        assert!(outcome.repartitioned);
        let (h1, h2) = (
            first.config().distribution.clone().unwrap(),
            second.config().distribution.clone().unwrap(),
        );
        assert_ne!(h1, h2);
        assert_eq!(Experiment::open(second.path()).unwrap().config().partition, changed.partition);
        // Batches on disk match the new record.
        let (train, _) = second.client_data(1).unwrap();
        assert_eq!(crate::data::Batch::len(&train), h2.clients[1].train_size);
    }

    #[test]
    fn corrupt_config_is_reported() {
        let root = tempfile::tempdir().unwrap();
        let cfg = sample();
        let dir = root.path().join(&cfg.experiment_name);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(CONFIG_FILE), "{not json").unwrap();
        let err = Experiment::init(root.path(), cfg.clone(), load(&cfg)).unwrap_err();
        assert!(matches!(err, Error::CorruptConfig { .. }), "{err}");
    }

    #[test]
    fn append_and_read_back() {
        let root = tempfile::tempdir().unwrap();
        let cfg = sample();
        let (exp, _) = Experiment::init(root.path(), cfg.clone(), load(&cfg)).unwrap();
        exp.begin_run().unwrap();
        let rec = epoch(2, 1, 1);
        exp.append_epoch_record(&rec).unwrap();
        exp.append_round_record(&round(1)).unwrap();
        let (back, skipped) = read_lines::<EpochRecord>(&exp.temp_results().join(client_log_name(2))).unwrap();
        assert_eq!((back, skipped), (vec![rec], 0));
        let (rounds, _) = read_lines::<RoundRecord>(&exp.temp_logs().join(SERVER_LOG)).unwrap();
        assert_eq!(rounds, vec![round(1)]);
    }

    #[test]
    fn concurrent_clients_write_distinct_files() {
        let root = tempfile::tempdir().unwrap();
        let cfg = sample();
        let (exp, _) = Experiment::init(root.path(), cfg.clone(), load(&cfg)).unwrap();
        exp.begin_run().unwrap();
        std::thread::scope(|s| {
            for id in 0..2 {
                let exp = &exp;
                s.spawn(move || {
                    for e in 1..=5 {
                        exp.append_epoch_record(&epoch(id, 1, e)).unwrap();
                    }
                });
            }
        });
        for id in 0..2 {
            let (recs, _) = read_lines::<EpochRecord>(&exp.temp_results().join(client_log_name(id))).unwrap();
            assert_eq!(recs.len(), 5);
        }
    }

    #[test]
    fn truncated_trailing_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        for e in 1..=3 {
            append_line(&path, &epoch(0, 1, e)).unwrap();
        }
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 25]).unwrap();
        let (recs, skipped) = read_lines::<EpochRecord>(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn finalize_promotes_temp() {
        let root = tempfile::tempdir().unwrap();
        let cfg = sample();
        let (exp, _) = Experiment::init(root.path(), cfg.clone(), load(&cfg)).unwrap();
        for run in 0..2u64 {
            exp.begin_run().unwrap();
            for r in 1..=3 {
                exp.append_round_record(&round(r)).unwrap();
            }
            assert_eq!(exp.finalize_run().unwrap(), run);
            let dir = exp.run_dir(run);
            let (rounds, _) = read_lines::<RoundRecord>(&dir.join(LOGS_DIR).join(SERVER_LOG)).unwrap();
            assert_eq!(rounds.len(), 3);
            assert!(dir.join(RESULTS_DIR).is_dir());
            assert_eq!(
                fs::read(dir.join(CONFIG_FILE)).unwrap(),
                fs::read(exp.path().join(CONFIG_FILE)).unwrap()
            );
            assert_eq!(fs::read_dir(exp.temp_dir()).unwrap().count(), 0);
        }
        assert!(exp.run_dir(0).is_dir() && exp.run_dir(1).is_dir());
    }

    #[test]
    fn interrupted_run_is_preserved() {
        let root = tempfile::tempdir().unwrap();
        let cfg = sample();
        let (exp, _) = Experiment::init(root.path(), cfg.clone(), load(&cfg)).unwrap();
        exp.begin_run().unwrap();
        exp.append_round_record(&round(1)).unwrap();
        exp.begin_run().unwrap();
        assert!(exp.runs_dir().join("aborted-0/logs").join(SERVER_LOG).is_file());
        assert_eq!(next_run_id(&exp.runs_dir()).unwrap(), 0);
    }

    #[test]
    fn wait_for_times_out_on_missing_experiment() {
        let root = tempfile::tempdir().unwrap();
        let err = Experiment::wait_for(&root.path().join("nope"), Duration::from_millis(10), Some(Duration::from_millis(50)));
        assert!(err.is_err());
    }
}
