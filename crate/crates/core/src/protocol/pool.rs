//! Connected-client sets the round loop talks to.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::Duration;

use super::client::{ClientNode, Step};
use super::transport::{split_counted, BoxWrite, Connection};
use super::wire::{read_frame, write_frame, Body, Message};
use crate::error::{Error, Result};
use crate::monitor::Traffic;

#[derive(Debug, Clone, PartialEq)]
pub enum PoolEvent {
    Message(u32, Message),
    Left(u32),
}

pub trait ClientPool {
    /// Next event, or `None` if nothing arrived within `timeout`.
    fn poll(&mut self, timeout: Duration) -> Result<Option<PoolEvent>>;
    /// Joined client ids, ascending.
    fn connected(&self) -> Vec<u32>;
    fn send(&mut self, client: u32, msg: &Message) -> Result<()>;
    /// True when an empty poll means no further events can arrive.
    fn is_synchronous(&self) -> bool {
        false
    }
}

enum NetEvent {
    Connected(u64, BoxWrite),
    Frame(u64, Message),
    Closed(u64),
    Broken(u64, String),
}

struct Conn {
    writer: BoxWrite,
    client: Option<u32>,
}

/// Clients on real or in-memory byte streams. One reader thread per
/// connection feeds a single event queue consumed by the round loop.
pub struct NetworkPool {
    events: Receiver<NetEvent>,
    conns: HashMap<u64, Conn>,
    clients: BTreeMap<u32, u64>,
    num_clients: usize,
    stop: Arc<AtomicBool>,
}

fn spawn_reader(conn: Box<dyn Connection>, id: u64, traffic: &Arc<Traffic>, tx: &Sender<NetEvent>) {
    let (mut reader, writer) = match split_counted(conn, traffic) {
        Ok(halves) => halves,
        Err(e) => {
            log::warn!("dropping connection {id}: {e}");
            return;
        }
    };
    if tx.send(NetEvent::Connected(id, writer)).is_err() {
        return;
    }
    let tx = tx.clone();
    let spawned = std::thread::Builder::new().name(format!("conn-{id}")).spawn(move || loop {
        let event = match read_frame(&mut reader) {
            Ok(Some(m)) => NetEvent::Frame(id, m),
            Ok(None) => NetEvent::Closed(id),
            Err(e) => NetEvent::Broken(id, e.to_string()),
        };
        let last = !matches!(event, NetEvent::Frame(..));
        if tx.send(event).is_err() || last {
            return;
        }
    });
    if let Err(e) = spawned {
        log::warn!("no reader thread for connection {id}: {e}");
    }
}

impl NetworkPool {
    /// Accepts connections handed over on `incoming`. Client ids must be
    /// below `num_clients`.
    pub fn from_channel(incoming: Receiver<Box<dyn Connection>>, traffic: Arc<Traffic>, num_clients: usize) -> Self {
        let (tx, events) = mpsc::channel();
        std::thread::spawn(move || {
            for (id, conn) in incoming.into_iter().enumerate() {
                spawn_reader(conn, id as u64, &traffic, &tx);
            }
        });
        Self {
            events,
            conns: HashMap::new(),
            clients: BTreeMap::new(),
            num_clients,
            stop: Arc::new(AtomicBool::new(false)),
        }
    }

    /// Listens on TCP.
    pub fn listen(addr: impl ToSocketAddrs, traffic: Arc<Traffic>, num_clients: usize) -> Result<(Self, SocketAddr)> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Protocol(format!("bind failed: {e}")))?;
        let local = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let (tx, events) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        std::thread::Builder::new().name("acceptor".into()).spawn(move || {
            let mut next = 0u64;
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        log::info!("connection from {peer}");
                        if let Err(e) = stream.set_nonblocking(false) {
                            log::warn!("{peer}: {e}");
                            continue;
                        }
                        spawn_reader(Box::new(stream), next, &traffic, &tx);
                        next += 1;
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(10));
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        })?;
        Ok((
            Self {
                events,
                conns: HashMap::new(),
                clients: BTreeMap::new(),
                num_clients,
                stop,
            },
            local,
        ))
    }

    fn reject(&mut self, conn: u64, round: u32, text: String) {
        log::warn!("connection {conn}: {text}");
        if let Some(mut c) = self.conns.remove(&conn) {
            let _ = write_frame(&mut c.writer, &Message::new(round, Body::Error(text)));
        }
    }

    fn drop_conn(&mut self, conn: u64) -> Option<PoolEvent> {
        let c = self.conns.remove(&conn)?;
        let client = c.client?;
        self.clients.remove(&client);
        log::info!("client {client} disconnected");
        Some(PoolEvent::Left(client))
    }
}

impl Drop for NetworkPool {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

impl ClientPool for NetworkPool {
    fn poll(&mut self, timeout: Duration) -> Result<Option<PoolEvent>> {
        let event = match self.events.recv_timeout(timeout) {
            Ok(e) => e,
            Err(RecvTimeoutError::Timeout) => return Ok(None),
            Err(RecvTimeoutError::Disconnected) => {
                std::thread::sleep(timeout);
                return Ok(None);
            }
        };
        match event {
            NetEvent::Connected(id, writer) => {
                self.conns.insert(id, Conn { writer, client: None });
                Ok(None)
            }
            NetEvent::Frame(id, msg) => {
                let Some(conn) = self.conns.get_mut(&id) else {
                    return Ok(None);
                };
                match (conn.client, msg.body) {
                    (None, Body::Join { client_id }) => {
                        if client_id as usize >= self.num_clients {
                            self.reject(id, msg.round, format!("client id {client_id} out of range"));
                        } else if self.clients.contains_key(&client_id) {
                            self.reject(id, msg.round, format!("client {client_id} already joined"));
                        } else if write_frame(&mut conn.writer, &Message::new(0, Body::JoinAck)).is_ok() {
                            conn.client = Some(client_id);
                            self.clients.insert(client_id, id);
                            log::info!("client {client_id} joined");
                        } else {
                            self.conns.remove(&id);
                        }
                        Ok(None)
                    }
                    (None, _) => {
                        self.reject(id, msg.round, "expected JOIN".into());
                        Ok(None)
                    }
                    (Some(client), Body::Join { .. }) => {
                        log::warn!("client {client} sent a second JOIN");
                        Ok(None)
                    }
                    (Some(client), body) => Ok(Some(PoolEvent::Message(client, Message::new(msg.round, body)))),
                }
            }
            NetEvent::Closed(id) => Ok(self.drop_conn(id)),
            NetEvent::Broken(id, why) => {
                if self.conns.contains_key(&id) {
                    let left = self.conns.get(&id).and_then(|c| c.client);
                    self.reject(id, 0, format!("malformed message: {why}"));
                    if let Some(client) = left {
                        self.clients.remove(&client);
                        return Ok(Some(PoolEvent::Left(client)));
                    }
                }
                Ok(None)
            }
        }
    }

    fn connected(&self) -> Vec<u32> {
        self.clients.keys().copied().collect()
    }

    fn send(&mut self, client: u32, msg: &Message) -> Result<()> {
        let conn = self
            .clients
            .get(&client)
            .and_then(|id| self.conns.get_mut(id))
            .ok_or_else(|| Error::Protocol(format!("client {client} is not connected")))?;
        write_frame(&mut conn.writer, msg)?;
        Ok(())
    }
}

/// Clients driven synchronously on the calling thread. Every message still
/// goes through encode and decode, and is counted as traffic.
pub struct InlinePool {
    nodes: BTreeMap<u32, ClientNode>,
    finished: Vec<ClientNode>,
    queue: VecDeque<PoolEvent>,
    traffic: Arc<Traffic>,
}

impl InlinePool {
    pub fn new(nodes: Vec<ClientNode>, traffic: Arc<Traffic>) -> Result<Self> {
        let mut pool = Self {
            nodes: BTreeMap::new(),
            finished: Vec::new(),
            queue: VecDeque::new(),
            traffic,
        };
        for node in nodes {
            let join = pool.transfer(&node.join_message(), false)?;
            let Body::Join { client_id } = join.body else { unreachable!() };
            if pool.nodes.contains_key(&client_id) {
                return Err(Error::Protocol(format!("client {client_id} already joined")));
            }
            pool.transfer(&Message::new(0, Body::JoinAck), true)?;
            pool.nodes.insert(client_id, node);
        }
        Ok(pool)
    }

    fn transfer(&self, msg: &Message, outbound: bool) -> Result<Message> {
        let payload = msg.encode()?;
        let n = 4 + payload.len() as u64;
        if outbound {
            self.traffic.add_out(n);
        } else {
            self.traffic.add_in(n);
        }
        Message::decode(&payload)
    }

    /// All nodes, in ascending id order.
    pub fn into_nodes(self) -> Vec<ClientNode> {
        let mut all: Vec<ClientNode> = self.nodes.into_values().chain(self.finished).collect();
        all.sort_by_key(|n| n.id());
        all
    }
}

impl ClientPool for InlinePool {
    fn poll(&mut self, _timeout: Duration) -> Result<Option<PoolEvent>> {
        Ok(self.queue.pop_front())
    }

    fn connected(&self) -> Vec<u32> {
        self.nodes.keys().copied().collect()
    }

    fn send(&mut self, client: u32, msg: &Message) -> Result<()> {
        let delivered = self.transfer(msg, true)?;
        let node = self
            .nodes
            .get_mut(&client)
            .ok_or_else(|| Error::Protocol(format!("client {client} is not connected")))?;
        match node.handle(delivered) {
            Step::Reply(reply) => {
                let reply = self.transfer(&reply, false)?;
                self.queue.push_back(PoolEvent::Message(client, reply));
            }
            Step::Done => {
                let node = self.nodes.remove(&client).unwrap();
                self.finished.push(node);
            }
            Step::Abort(reply) => {
                let reply = self.transfer(&reply, false)?;
                self.queue.push_back(PoolEvent::Message(client, reply));
                self.queue.push_back(PoolEvent::Left(client));
                let node = self.nodes.remove(&client).unwrap();
                self.finished.push(node);
            }
        }
        Ok(())
    }

    fn is_synchronous(&self) -> bool {
        true
    }
}
