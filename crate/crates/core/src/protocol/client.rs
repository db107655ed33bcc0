//! Client loop: train on FIT_INS, evaluate on EVAL_INS, stop on DONE.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use super::transport::{split_counted, Connection};
use super::wire::{read_frame, write_frame, Body, Message};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{evaluate, train_local, ModelSpec};
use crate::monitor::Traffic;
use crate::params::Params;
use crate::storage::{EpochRecord, Experiment};
use crate::strategies::{EvalResult, FitResult};

pub const CONNECT_ATTEMPTS: u32 = 10;
pub const POLL_INTERVAL: Duration = Duration::from_secs(1);

pub type EpochSink = Box<dyn FnMut(&EpochRecord) -> Result<()> + Send>;

/// What the client does after handling a message.
#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Reply(Message),
    Done,
    /// Send the message, then disconnect.
    Abort(Message),
}

/// Protocol state of one client. Holds only its own data.
pub struct ClientNode {
    id: u32,
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
    sink: EpochSink,
    last_global: Option<Params>,
    last_local: Option<Params>,
    epoch_records: usize,
}

impl ClientNode {
    pub fn new(id: u32, spec: ModelSpec, train: Dataset, test: Dataset, sink: EpochSink) -> Self {
        Self {
            id,
            spec,
            train,
            test,
            sink,
            last_global: None,
            last_local: None,
            epoch_records: 0,
        }
    }

    /// A node reading its batches from `exp` and logging into its `.temp`.
    pub fn from_experiment(exp: &Experiment, id: u32) -> Result<Self> {
        let (train, test) = exp.client_data(id as usize)?;
        let writer = exp.clone();
        Ok(Self::new(
            id,
            exp.config().model.clone(),
            train,
            test,
            Box::new(move |r| writer.append_epoch_record(r)),
        ))
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    /// Parameters received with the latest EVAL_INS.
    pub fn last_global(&self) -> Option<&Params> {
        self.last_global.as_ref()
    }

    /// Parameters produced by the latest local training.
    pub fn last_local(&self) -> Option<&Params> {
        self.last_local.as_ref()
    }

    pub fn epoch_records(&self) -> usize {
        self.epoch_records
    }

    pub fn join_message(&self) -> Message {
        Message::new(0, Body::Join { client_id: self.id })
    }

    pub fn handle(&mut self, msg: Message) -> Step {
        let round = msg.round;
        match self.try_handle(msg) {
            Ok(step) => step,
            Err(e) => {
                log::warn!("client {}: {e}", self.id);
                Step::Abort(Message::new(round, Body::Error(e.to_string())))
            }
        }
    }

    fn try_handle(&mut self, msg: Message) -> Result<Step> {
        let round = msg.round;
        match msg.body {
            Body::FitIns { params, config } => {
                let (spec, test, id) = (&self.spec, &self.test, self.id);
                let sink = &mut self.sink;
                let mut written = 0;
                let trained = train_local(spec, &params, &self.train, &config, |epoch, p| {
                    let (test_loss, confusion) = evaluate(spec, p, test)?;
                    let record = EpochRecord {
                        client_id: id,
                        round,
                        epoch: epoch as u32,
                        test_loss,
                        num_test: test.len() as u64,
                        metrics: metrics::compute(&confusion)?,
                        confusion,
                    };
                    sink(&record)?;
                    written += 1;
                    Ok(())
                })?;
                self.epoch_records += written;
                let (train_loss, _) = evaluate(spec, &trained, &self.train)?;
                self.last_local = Some(trained.clone());
                Ok(Step::Reply(Message::new(
                    round,
                    Body::FitRes(FitResult {
                        client_id: self.id,
                        params: trained,
                        num_examples: self.train.len() as u64,
                        train_loss,
                    }),
                )))
            }
            Body::EvalIns { params } => {
                let (loss, confusion) = evaluate(&self.spec, &params, &self.test)?;
                self.last_global = Some(params);
                Ok(Step::Reply(Message::new(
                    round,
                    Body::EvalRes(EvalResult {
                        client_id: self.id,
                        loss,
                        num_examples: self.test.len() as u64,
                        confusion,
                    }),
                )))
            }
            Body::Done => Ok(Step::Done),
            Body::Error(text) => Err(Error::Protocol(format!("server error: {text}"))),
            other => Err(Error::Protocol(format!("unexpected {:?} from server", Message::new(round, other).kind()))),
        }
    }
}

/// Runs the JOIN handshake and message loop over an established stream.
pub fn serve_connection<R: Read + ?Sized, W: Write + ?Sized>(
    node: &mut ClientNode,
    reader: &mut R,
    writer: &mut W,
) -> Result<()> {
    write_frame(writer, &node.join_message())?;
    match read_frame(reader)? {
        Some(Message { body: Body::JoinAck, .. }) => {}
        Some(Message { body: Body::Error(text), .. }) => {
            return Err(Error::Protocol(format!("join rejected: {text}")));
        }
        Some(Message { body: Body::Done, .. }) => return Ok(()),
        Some(other) => {
            let text = format!("expected JOIN_ACK, got {:?}", other.kind());
            let _ = write_frame(writer, &Message::new(other.round, Body::Error(text.clone())));
            return Err(Error::Protocol(text));
        }
        None => return Err(Error::Protocol("server closed the connection during JOIN".into())),
    }
    loop {
        let msg = match read_frame(reader) {
            Ok(Some(m)) => m,
            Ok(None) => return Err(Error::Protocol("server closed the connection before DONE".into())),
            Err(e) => {
                let _ = write_frame(writer, &Message::new(0, Body::Error(e.to_string())));
                return Err(e);
            }
        };
        match node.handle(msg) {
            Step::Reply(reply) => {
                write_frame(writer, &reply)?;
            }
            Step::Done => return Ok(()),
            Step::Abort(reply) => {
                let text = match &reply.body {
                    Body::Error(t) => t.clone(),
                    _ => String::new(),
                };
                let _ = write_frame(writer, &reply);
                return Err(Error::Protocol(text));
            }
        }
    }
}

/// Like [`serve_connection`] over a [`Connection`], counting bytes.
pub fn serve_stream(node: &mut ClientNode, conn: Box<dyn Connection>, traffic: &Arc<Traffic>) -> Result<()> {
    let (mut r, mut w) = split_counted(conn, traffic)?;
    serve_connection(node, &mut r, &mut w)
}

/// Connects with up to `attempts` tries spaced by `retry_delay`.
pub fn connect_with_retry(addr: &str, attempts: u32, retry_delay: Duration) -> Result<TcpStream> {
    let mut last = None;
    for attempt in 1..=attempts.max(1) {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                log::info!("connect to {addr} failed (attempt {attempt}/{attempts}): {e}");
                last = Some(e);
            }
        }
        if attempt < attempts {
            std::thread::sleep(retry_delay);
        }
    }
    log::warn!("giving up on {addr}: {}", last.map(|e| e.to_string()).unwrap_or_default());
    Err(Error::ConnectRefused {
        addr: addr.to_string(),
        attempts,
    })
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub connect_attempts: u32,
    pub retry_delay: Duration,
    pub poll_interval: Duration,
    /// Give up waiting for the experiment after this long; `None` waits forever.
    pub init_timeout: Option<Duration>,
    pub traffic: Arc<Traffic>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            connect_attempts: CONNECT_ATTEMPTS,
            retry_delay: POLL_INTERVAL,
            poll_interval: POLL_INTERVAL,
            init_timeout: None,
            traffic: Traffic::new(),
        }
    }
}

/// Waits for the experiment, loads this client's batches, connects and
/// serves until DONE.
pub fn run_client(server: &str, client_id: u32, experiment: &Path, opts: &ClientOptions) -> Result<ClientNode> {
    let exp = Experiment::wait_for(experiment, opts.poll_interval, opts.init_timeout)?;
    let clients = exp.config().partition.num_clients;
    if client_id as usize >= clients {
        return Err(Error::InvalidPartitionSpec(format!(
            "client id {client_id} out of range for {clients} clients"
        )));
    }
    let mut node = ClientNode::from_experiment(&exp, client_id)?;
    let stream = connect_with_retry(server, opts.connect_attempts, opts.retry_delay)?;
    serve_stream(&mut node, Box::new(stream), &opts.traffic)?;
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::model::{init_params, TrainConfig};
    use std::sync::Mutex;

    fn node(records: Arc<Mutex<Vec<EpochRecord>>>) -> ClientNode {
        let ds: Dataset = make_synthetic(2, 10, 3, 1).unwrap();
        let train = ds.subset(&(0..14).collect::<Vec<_>>()).unwrap();
        let test = ds.subset(&(14..20).collect::<Vec<_>>()).unwrap();
        ClientNode::new(
            5,
            ModelSpec::logreg(3, 2, 0),
            train,
            test,
            Box::new(move |r| {
                records.lock().unwrap().push(r.clone());
                Ok(())
            }),
        )
    }

    #[test]
    fn fit_writes_one_record_per_epoch() {
        let records = Arc::new(Mutex::new(Vec::new()));
        let mut n = node(records.clone());
        let params = init_params(&ModelSpec::logreg(3, 2, 0)).unwrap();
        let cfg = TrainConfig {
            local_epochs: 2,
            batch_size: 4,
            learning_rate: 0.1,
            shuffle_seed: 3,
        };
        let step = n.handle(Message::new(4, Body::FitIns { params, config: cfg }));
        let Step::Reply(Message { round: 4, body: Body::FitRes(res) }) = step else {
            panic!("{step:?}")
        };
        assert_eq!((res.client_id, res.num_examples), (5, 14));
        let recs = records.lock().unwrap();
        assert_eq!(recs.iter().map(|r| (r.round, r.epoch)).collect::<Vec<_>>(), vec![(4, 1), (4, 2)]);
        assert_eq!(recs[0].num_test, 6);
    }

    #[test]
    fn done_first_writes_nothing() {
        let records = Arc::new(Mutex::new(Vec::new()));
        let mut n = node(records.clone());
        assert_eq!(n.handle(Message::new(1, Body::Done)), Step::Done);
        assert!(records.lock().unwrap().is_empty());
    }

    #[test]
    fn layout_mismatch_aborts_with_error() {
        let mut n = node(Arc::new(Mutex::new(Vec::new())));
        let params = Params::new(vec![0.0; 3], "other").unwrap();
        match n.handle(Message::new(1, Body::EvalIns { params })) {
            Step::Abort(Message { body: Body::Error(_), .. }) => {}
            s => panic!("{s:?}"),
        }
        match n.handle(Message::new(1, Body::JoinAck)) {
            Step::Abort(_) => {}
            s => panic!("{s:?}"),
        }
    }

    #[test]
    fn refused_connection_gives_up() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = connect_with_retry(&format!("127.0.0.1:{port}"), 3, Duration::from_millis(1)).unwrap_err();
        assert!(matches!(err, Error::ConnectRefused { attempts: 3, .. }));
    }
}
