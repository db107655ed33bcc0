//! Server round loop.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_pcg::Pcg64;
use sha2::{Digest, Sha256};

use super::pool::{ClientPool, PoolEvent};
use super::wire::{Body, Message, MessageType};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelSpec, TrainConfig};
use crate::monitor::{start_sampler, unix_now, Registry, SamplerConfig, Traffic};
use crate::params::Params;
use crate::storage::{derive_seed, ExperimentConfig, Experiment, RoundRecord, RoundStatus, Seeds, LOGS_DIR};
use crate::strategies::{aggregate_eval, EvalResult, FitResult, StrategyConfig, StrategyState};

const POLL_SLICE: Duration = Duration::from_millis(50);
pub const PARAMS_DIR: &str = "params";

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub listen_address: String,
    pub rounds: u32,
    pub min_available_clients: usize,
    pub fraction_fit: f64,
    pub round_timeout: Duration,
    pub strategy: StrategyConfig,
    pub model: ModelSpec,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seeds: Seeds,
}

impl ServerConfig {
    pub fn from_experiment(cfg: &ExperimentConfig) -> Self {
        Self {
            listen_address: cfg.server.listen_address.clone(),
            rounds: cfg.rounds,
            min_available_clients: cfg.server.min_available_clients,
            fraction_fit: cfg.server.fraction_fit,
            round_timeout: Duration::from_secs_f64(cfg.server.round_timeout_secs),
            strategy: cfg.fl_strategy.clone(),
            model: cfg.model.clone(),
            local_epochs: cfg.local_epochs,
            batch_size: cfg.train.batch_size,
            learning_rate: cfg.train.learning_rate,
            seeds: cfg.seeds.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0
            || self.min_available_clients == 0
            || !(self.fraction_fit > 0.0 && self.fraction_fit <= 1.0)
            || self.round_timeout.is_zero()
        {
            return Err(Error::InvalidServerConfig(format!("{self:?}")));
        }
        self.strategy.validate()?;
        self.model.validate()?;
        self.train_config(0, 0).validate()
    }

    /// Local training settings for `client` in `round`.
    pub fn train_config(&self, client: u32, round: u32) -> TrainConfig {
        TrainConfig {
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            shuffle_seed: derive_seed(derive_seed(self.seeds.training, client as u64), round as u64),
        }
    }

    /// Clients trained in `round`: `ceil(fraction_fit * n)` of `connected`,
    /// drawn uniformly, ascending.
    pub fn sample_clients(&self, connected: &[u32], round: u32) -> Vec<u32> {
        let n = connected.len();
        if n == 0 {
            return Vec::new();
        }
        let k = ((self.fraction_fit * n as f64).ceil() as usize).clamp(1, n);
        let mut rng = Pcg64::seed_from_u64(derive_seed(self.seeds.sampling, round as u64));
        let mut picked: Vec<u32> = rand::seq::index::sample(&mut rng, n, k).into_iter().map(|i| connected[i]).collect();
        picked.sort_unstable();
        picked
    }
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub shutdown: Arc<AtomicBool>,
    pub traffic: Arc<Traffic>,
    pub registry: Option<Registry>,
    /// Resource sampling period; `None` disables the sampler.
    pub sample_interval: Option<Duration>,
    /// Write every accepted FIT_RES and each new global vector under
    /// `logs/params/round-<t>/`.
    pub dump_params: bool,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            shutdown: Arc::new(AtomicBool::new(false)),
            traffic: Traffic::new(),
            registry: None,
            sample_interval: None,
            dump_params: false,
        }
    }
}

/// A message crossing the server boundary, for timing analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub at: f64,
    pub round: u32,
    pub client: u32,
    pub kind: MessageType,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: u64,
    pub rounds: Vec<RoundRecord>,
    pub final_state: StrategyState,
    pub exchanges: Vec<Exchange>,
}

impl RunSummary {
    pub fn final_params(&self) -> &Params {
        &self.final_state.global
    }
}

pub fn params_digest(params: &Params) -> String {
    let digest = Sha256::digest(params.serialize());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct RoundLoop<'a, P: ClientPool> {
    cfg: &'a ServerConfig,
    exp: &'a Experiment,
    pool: &'a mut P,
    opts: &'a ServerOptions,
    exchanges: Vec<Exchange>,
}

impl<P: ClientPool> RoundLoop<'_, P> {
    fn check_shutdown(&self) -> Result<()> {
        if self.opts.shutdown.load(Ordering::SeqCst) {
            return Err(Error::Shutdown);
        }
        Ok(())
    }

    fn wait_for_clients(&mut self) -> Result<()> {
        let min = self.cfg.min_available_clients;
        let mut announced = usize::MAX;
        loop {
            let n = self.pool.connected().len();
            if n >= min {
                return Ok(());
            }
            if n != announced {
                log::info!("waiting for clients: {n}/{min} connected");
                announced = n;
            }
            self.check_shutdown()?;
            match self.pool.poll(POLL_SLICE)? {
                Some(PoolEvent::Message(c, m)) => log::warn!("ignoring {:?} from client {c} before round 1", m.kind()),
                Some(PoolEvent::Left(_)) => {}
                None if self.pool.is_synchronous() => {
                    return Err(Error::Protocol(format!("only {n} of {min} required clients are available")));
                }
                None => {}
            }
        }
    }

    fn send(&mut self, client: u32, msg: &Message) -> bool {
        let kind = msg.kind();
        match self.pool.send(client, msg) {
            Ok(()) => {
                self.exchanges.push(Exchange {
                    at: unix_now(),
                    round: msg.round,
                    client,
                    kind,
                });
                true
            }
            Err(e) => {
                log::warn!("send {kind:?} to client {client} failed: {e}");
                false
            }
        }
    }

    /// Gathers replies of type `want` for `round` from `pending` until all
    /// arrive or the round timeout passes. Returns the accepted messages and
    /// the number of stale FIT_RES dropped.
    fn collect(&mut self, round: u32, want: MessageType, mut pending: BTreeSet<u32>) -> Result<(Vec<(u32, Body)>, u32)> {
        let deadline = Instant::now() + self.cfg.round_timeout;
        let mut got = Vec::new();
        let mut stale = 0;
        while !pending.is_empty() {
            self.check_shutdown()?;
            let now = Instant::now();
            if now >= deadline {
                log::warn!("round {round}: {want:?} timed out waiting for {pending:?}");
                break;
            }
            let event = self.pool.poll((deadline - now).min(POLL_SLICE))?;
            match event {
                None if self.pool.is_synchronous() => break,
                None => {}
                Some(PoolEvent::Left(c)) => {
                    pending.remove(&c);
                }
                Some(PoolEvent::Message(c, msg)) => {
                    let kind = msg.kind();
                    if let Body::Error(text) = &msg.body {
                        log::warn!("client {c} reported an error: {text}");
                        pending.remove(&c);
                        continue;
                    }
                    if msg.round != round || kind != want || !pending.contains(&c) {
                        let fit_window_closed = msg.round < round || want != MessageType::FitRes;
                        if kind == MessageType::FitRes && fit_window_closed {
                            stale += 1;
                        }
                        log::warn!("round {round}: discarding {kind:?} for round {} from client {c}", msg.round);
                        continue;
                    }
                    let claimed = match &msg.body {
                        Body::FitRes(r) => r.client_id,
                        Body::EvalRes(r) => r.client_id,
                        _ => c,
                    };
                    if claimed != c {
                        log::warn!("client {c} sent a result labelled {claimed}; discarded");
                        pending.remove(&c);
                        continue;
                    }
                    self.exchanges.push(Exchange {
                        at: unix_now(),
                        round,
                        client: c,
                        kind,
                    });
                    pending.remove(&c);
                    got.push((c, msg.body));
                }
            }
        }
        Ok((got, stale))
    }

    fn dump(&self, round: u32, name: &str, params: &Params) -> Result<()> {
        if !self.opts.dump_params {
            return Ok(());
        }
        let dir = self.exp.temp_logs().join(PARAMS_DIR).join(format!("round-{round}"));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join(format!("{name}.bin")), params.serialize())?;
        Ok(())
    }

    fn broadcast_done(&mut self, round: u32) {
        for c in self.pool.connected() {
            self.send(c, &Message::new(round, Body::Done));
        }
    }

    fn run(&mut self) -> Result<(Vec<RoundRecord>, StrategyState)> {
        let cfg = self.cfg;
        let mut state = StrategyState::new(cfg.strategy.clone(), init_params(&cfg.model)?)?;
        self.dump(0, "global", &state.global)?;
        self.wait_for_clients()?;
        let mut records = Vec::new();
        for round in 1..=cfg.rounds {
            let sampled = cfg.sample_clients(&self.pool.connected(), round);
            log::info!("round {round}: fitting on {sampled:?}");
            let mut pending = BTreeSet::new();
            for &c in &sampled {
                let msg = Message::new(
                    round,
                    Body::FitIns {
                        params: state.global.clone(),
                        config: cfg.train_config(c, round),
                    },
                );
                if self.send(c, &msg) {
                    pending.insert(c);
                }
            }
            let (replies, mut stale) = self.collect(round, MessageType::FitRes, pending)?;
            let mut results: Vec<FitResult> = replies
                .into_iter()
                .filter_map(|(_, b)| match b {
                    Body::FitRes(r) => Some(r),
                    _ => None,
                })
                .filter(|r| {
                    let ok = r.params.is_compatible(&state.global);
                    if !ok {
                        log::warn!("client {} returned incompatible parameters", r.client_id);
                    }
                    ok
                })
                .collect();
            results.sort_by_key(|r| r.client_id);
            let participants: Vec<u32> = results.iter().map(|r| r.client_id).collect();

            if results.is_empty() {
                let record = RoundRecord {
                    round,
                    status: RoundStatus::Failed,
                    sampled,
                    participants,
                    eval_participants: Vec::new(),
                    loss_distributed: None,
                    accuracy_distributed: None,
                    discarded_stale: stale,
                    params_sha256: params_digest(&state.global),
                };
                self.exp.append_round_record(&record)?;
                self.broadcast_done(round);
                log::error!("round {round}: no fit results, aborting");
                return Err(Error::RoundFailed { round });
            }
            for r in &results {
                self.dump(round, &format!("client-{}", r.client_id), &r.params)?;
            }
            state = state.aggregate(&results)?;
            self.dump(round, "global", &state.global)?;

            let everyone: BTreeSet<u32> = self.pool.connected().into_iter().collect();
            let mut eval_pending = BTreeSet::new();
            for c in everyone {
                if self.send(c, &Message::new(round, Body::EvalIns { params: state.global.clone() })) {
                    eval_pending.insert(c);
                }
            }
            let (replies, late) = self.collect(round, MessageType::EvalRes, eval_pending)?;
            stale += late;
            let mut evals: Vec<EvalResult> = replies
                .into_iter()
                .filter_map(|(_, b)| match b {
                    Body::EvalRes(r) => Some(r),
                    _ => None,
                })
                .collect();
            evals.sort_by_key(|r| r.client_id);
            let (loss, accuracy) = match aggregate_eval(&evals) {
                Ok((l, a)) => (Some(l), Some(a)),
                Err(e) => {
                    log::warn!("round {round}: no evaluation ({e})");
                    (None, None)
                }
            };
            let record = RoundRecord {
                round,
                status: RoundStatus::Ok,
                sampled,
                participants,
                eval_participants: evals.iter().map(|r| r.client_id).collect(),
                loss_distributed: loss,
                accuracy_distributed: accuracy,
                discarded_stale: stale,
                params_sha256: params_digest(&state.global),
            };
            self.exp.append_round_record(&record)?;
            if let Some(reg) = &self.opts.registry {
                reg.set_round(round as u64, accuracy);
            }
            log::info!(
                "round {round}: loss {} accuracy {}",
                loss.map_or("-".into(), |v| format!("{v:.4}")),
                accuracy.map_or("-".into(), |v| format!("{v:.4}"))
            );
            records.push(record);
        }
        self.broadcast_done(cfg.rounds);
        Ok((records, state))
    }
}

/// Runs all rounds against `pool` and promotes the run directory.
pub fn run_server<P: ClientPool>(cfg: &ServerConfig, exp: &Experiment, pool: &mut P, opts: &ServerOptions) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.model != exp.config().model {
        return Err(Error::InvalidServerConfig("server model differs from the experiment's".into()));
    }
    exp.begin_run()?;
    let mut sampler = match opts.sample_interval {
        Some(interval) => Some(start_sampler(SamplerConfig {
            interval,
            role: "server".into(),
            id: 0,
            traffic: opts.traffic.clone(),
            registry: opts.registry.clone(),
            log: Some(exp.temp_dir().join(LOGS_DIR).join("resources-server-0.jsonl")),
        })?),
        None => None,
    };
    let mut looped = RoundLoop {
        cfg,
        exp,
        pool,
        opts,
        exchanges: Vec::new(),
    };
    let outcome = looped.run();
    let exchanges = std::mem::take(&mut looped.exchanges);
    if let Some(s) = sampler.as_mut() {
        s.stop();
    }
    let (rounds, final_state) = outcome?;
    let run_id = exp.finalize_run()?;
    log::info!("run finalized as {}", exp.run_dir(run_id).display());
    Ok(RunSummary {
        run_id,
        rounds,
        final_state,
        exchanges,
    })
}
