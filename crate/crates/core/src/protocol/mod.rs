//! Parameter-server protocol: wire format, transports, client and server
//! loops, and in-process simulation.

mod client;
mod pool;
mod server;
mod simulate;
pub mod transport;
pub mod wire;

pub use client::{
    connect_with_retry, run_client, serve_connection, serve_stream, ClientNode, ClientOptions, EpochSink, Step,
    CONNECT_ATTEMPTS, POLL_INTERVAL,
};
pub use pool::{ClientPool, InlinePool, NetworkPool, PoolEvent};
pub use server::{params_digest, run_server, Exchange, RunSummary, ServerConfig, ServerOptions, PARAMS_DIR};
pub use simulate::{simulate, ClientOutcome, SimMode, SimulationSummary};
pub use wire::{read_frame, write_frame, Body, Message, MessageType};
