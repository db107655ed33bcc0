//! In-process runs: all clients and the server in one process.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::mpsc;

use super::client::{serve_stream, ClientNode};
use super::pool::{InlinePool, NetworkPool};
use super::server::{run_server, RunSummary, ServerConfig, ServerOptions};
use super::transport::{pipe, Connection};
use crate::error::{Error, Result};
use crate::monitor::Traffic;
use crate::params::Params;
use crate::storage::Experiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    /// Single thread; clients fit one after another in ascending id.
    Deterministic,
    /// One thread per client over in-memory pipes.
    Concurrent,
}

impl FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" | "deterministic" => Ok(Self::Deterministic),
            "conc" | "concurrent" => Ok(Self::Concurrent),
            _ => Err(Error::InvalidServerConfig(format!("unknown simulation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub id: u32,
    pub epoch_records: usize,
    /// Global parameters from the last EVAL_INS the client saw.
    pub last_global: Option<Params>,
    /// Output of the client's last local training.
    pub last_local: Option<Params>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SimulationSummary {
    pub run: RunSummary,
    pub clients: BTreeMap<u32, ClientOutcome>,
    pub client_traffic: std::sync::Arc<Traffic>,
}

fn outcome(node: &ClientNode, error: Option<String>) -> ClientOutcome {
    ClientOutcome {
        id: node.id(),
        epoch_records: node.epoch_records(),
        last_global: node.last_global().cloned(),
        last_local: node.last_local().cloned(),
        error,
    }
}

/// Runs the experiment with `num_clients` in-process clients. Every client
/// must join before round 1.
pub fn simulate(exp: &Experiment, num_clients: usize, mode: SimMode, opts: &ServerOptions) -> Result<SimulationSummary> {
    let expected = exp.config().partition.num_clients;
    if num_clients != expected {
        return Err(Error::InvalidPartitionSpec(format!(
            "experiment is partitioned for {expected} clients, {num_clients} requested"
        )));
    }
    let mut cfg = ServerConfig::from_experiment(exp.config());
    cfg.min_available_clients = num_clients;
    let client_traffic = Traffic::new();
    let mut clients = BTreeMap::new();
    let run = match mode {
        SimMode::Deterministic => {
            let nodes = (0..num_clients as u32)
                .map(|id| ClientNode::from_experiment(exp, id))
                .collect::<Result<Vec<_>>>()?;
            let mut pool = InlinePool::new(nodes, opts.traffic.clone())?;
            let run = run_server(&cfg, exp, &mut pool, opts);
            for node in pool.into_nodes() {
                clients.insert(node.id(), outcome(&node, None));
            }
            run?
        }
        SimMode::Concurrent => {
            let (tx, rx) = mpsc::channel::<Box<dyn Connection>>();
            let mut pool = NetworkPool::from_channel(rx, opts.traffic.clone(), num_clients);
            let nodes = (0..num_clients as u32)
                .map(|id| ClientNode::from_experiment(exp, id))
                .collect::<Result<Vec<_>>>()?;
            let mut handles = Vec::new();
            for mut node in nodes {
                let (server_end, client_end) = pipe();
                tx.send(Box::new(server_end)).map_err(|_| Error::Protocol("server pool closed".into()))?;
                let traffic = client_traffic.clone();
                handles.push(std::thread::spawn(move || {
                    let res = serve_stream(&mut node, Box::new(client_end), &traffic);
                    (node, res)
                }));
            }
            drop(tx);
            let run = run_server(&cfg, exp, &mut pool, opts);
            drop(pool);
            for h in handles {
                let (node, res) = h.join().map_err(|_| Error::Protocol("client thread panicked".into()))?;
                clients.insert(node.id(), outcome(&node, res.err().map(|e| e.to_string())));
            }
            run?
        }
    };
    Ok(SimulationSummary {
        run,
        clients,
        client_traffic,
    })
}
