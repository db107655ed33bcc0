//! Process resource sampling and a `/metrics` text endpoint.

mod exposition;
mod http;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use exposition::{parse_exposition, ExpositionSample};
pub use http::{http_get, serve_metrics, MetricsEndpoint};

use crate::error::{Error, Result};
use crate::storage::append_line;

pub const DEFAULT_SAMPLE_INTERVAL: Duration = Duration::from_secs(10);

/// Byte counters for one process's protocol traffic.
#[derive(Debug, Default)]
pub struct Traffic {
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
}

impl Traffic {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn add_in(&self, n: u64) {
        self.bytes_in.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_out(&self, n: u64) {
        self.bytes_out.fetch_add(n, Ordering::Relaxed);
    }

    pub fn bytes_in(&self) -> u64 {
        self.bytes_in.load(Ordering::Relaxed)
    }

    pub fn bytes_out(&self) -> u64 {
        self.bytes_out.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    /// Unix seconds.
    pub timestamp: f64,
    pub role: String,
    pub id: u32,
    pub cpu_percent: f64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// User plus system CPU time consumed by this process.
pub fn process_cpu_time() -> Duration {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::zeroed();
    // SAFETY: getrusage only writes into the provided struct.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc != 0 {
        return Duration::ZERO;
    }
    // SAFETY: initialised by the successful call above (and zeroed before).
    let usage = unsafe { usage.assume_init() };
    let tv = |t: libc::timeval| Duration::new(t.tv_sec.max(0) as u64, (t.tv_usec.max(0) as u32) * 1000);
    tv(usage.ru_utime) + tv(usage.ru_stime)
}

#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub resources: BTreeMap<(String, u32), ResourceSample>,
    pub round: u64,
    pub accuracy_distributed: Option<f64>,
}

/// Latest gauges. Writers replace the whole snapshot; readers clone an `Arc`.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    inner: Arc<RwLock<Arc<Snapshot>>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn update(&self, f: impl FnOnce(&mut Snapshot)) {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let mut next = Snapshot::clone(&guard);
        f(&mut next);
        *guard = Arc::new(next);
    }

    pub fn record_sample(&self, sample: &ResourceSample) {
        self.update(|s| {
            s.resources.insert((sample.role.clone(), sample.id), sample.clone());
        });
    }

    pub fn set_round(&self, round: u64, accuracy: Option<f64>) {
        self.update(|s| {
            s.round = round;
            if accuracy.is_some() {
                s.accuracy_distributed = accuracy;
            }
        });
    }

    /// Text exposition of the current snapshot.
    pub fn render(&self) -> String {
        exposition::render(&self.snapshot())
    }
}

/// Who is being sampled and where samples go.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub interval: Duration,
    pub role: String,
    pub id: u32,
    pub traffic: Arc<Traffic>,
    pub registry: Option<Registry>,
    /// JSON-lines log the samples are appended to.
    pub log: Option<PathBuf>,
}

pub struct SamplerHandle {
    stop: Option<mpsc::Sender<()>>,
    thread: Option<JoinHandle<()>>,
    samples: Arc<Mutex<Vec<ResourceSample>>>,
}

impl SamplerHandle {
    /// Stops the sampler and waits for it. Safe to call more than once.
    pub fn stop(&mut self) {
        self.stop.take();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn samples(&self) -> Vec<ResourceSample> {
        self.samples.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Drop for SamplerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts a background thread taking one sample every `interval`, on a
/// fixed schedule measured from the start.
pub fn start_sampler(cfg: SamplerConfig) -> Result<SamplerHandle> {
    if cfg.interval.is_zero() {
        return Err(Error::InvalidServerConfig("sampling interval must be positive".into()));
    }
    let (tx, rx) = mpsc::channel::<()>();
    let samples = Arc::new(Mutex::new(Vec::new()));
    let out = samples.clone();
    let thread = std::thread::Builder::new()
        .name(format!("sampler-{}-{}", cfg.role, cfg.id))
        .spawn(move || {
            let start = Instant::now();
            let mut last_wall = start;
            let mut last_cpu = process_cpu_time();
            for k in 1u32.. {
                let due = start + cfg.interval * k;
                match rx.recv_timeout(due.saturating_duration_since(Instant::now())) {
                    Err(RecvTimeoutError::Timeout) => {}
                    _ => return,
                }
                let now = Instant::now();
                let cpu = process_cpu_time();
                let wall = now - last_wall;
                let cpu_percent = if wall.is_zero() {
                    0.0
                } else {
                    cpu.saturating_sub(last_cpu).as_secs_f64() / wall.as_secs_f64() * 100.0
                };
                (last_wall, last_cpu) = (now, cpu);
                let sample = ResourceSample {
                    timestamp: unix_now(),
                    role: cfg.role.clone(),
                    id: cfg.id,
                    cpu_percent,
                    bytes_in: cfg.traffic.bytes_in(),
                    bytes_out: cfg.traffic.bytes_out(),
                };
                if let Some(reg) = &cfg.registry {
                    reg.record_sample(&sample);
                }
                if let Some(path) = &cfg.log {
                    if let Err(e) = append_line(path, &sample) {
                        log::warn!("resource sample not written: {e}");
                    }
                }
                out.lock().unwrap_or_else(|e| e.into_inner()).push(sample);
            }
        })?;
    Ok(SamplerHandle {
        stop: Some(tx),
        thread: Some(thread),
        samples,
    })
}
