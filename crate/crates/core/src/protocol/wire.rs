//! Message framing.
//!
//! A frame is a u32 payload length followed by the payload. The payload is
//! a u8 type tag, a u32 round number and the body. Integers are big-endian,
//! reals are IEEE-754 binary64, and `params` uses the parameter vector
//! encoding (u16 layout length, layout, u32 count, values).
//!
//! | tag | type     | body                                                        |
//! |-----|----------|-------------------------------------------------------------|
//! | 1   | JOIN     | u32 client_id                                               |
//! | 2   | JOIN_ACK | empty                                                       |
//! | 3   | FIT_INS  | u32 epochs, u32 batch_size, f64 learning_rate, u64 seed, params |
//! | 4   | FIT_RES  | u32 client_id, u64 num_examples, f64 train_loss, params     |
//! | 5   | EVAL_INS | params                                                      |
//! | 6   | EVAL_RES | u32 client_id, u64 num_examples, f64 loss, u32 C, C*C u64 counts (row = true class) |
//! | 7   | DONE     | empty                                                       |
//! | 8   | ERROR    | u32 length, UTF-8 text                                      |

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::TrainConfig;
use crate::params::Params;
use crate::strategies::{EvalResult, FitResult};

/// Upper bound on a frame payload.
pub const MAX_FRAME_LEN: u32 = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Join = 1,
    JoinAck = 2,
    FitIns = 3,
    FitRes = 4,
    EvalIns = 5,
    EvalRes = 6,
    Done = 7,
    Error = 8,
}

impl MessageType {
    fn from_tag(tag: u8) -> Option<Self> {
        use MessageType::*;
        [Join, JoinAck, FitIns, FitRes, EvalIns, EvalRes, Done, Error]
            .into_iter()
            .find(|t| *t as u8 == tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Join { client_id: u32 },
    JoinAck,
    FitIns { params: Params, config: TrainConfig },
    FitRes(FitResult),
    EvalIns { params: Params },
    EvalRes(EvalResult),
    Done,
    Error(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: u32,
    pub body: Body,
}

impl Message {
    pub fn new(round: u32, body: Body) -> Self {
        Self { round, body }
    }

    pub fn kind(&self) -> MessageType {
        match self.body {
            Body::Join { .. } => MessageType::Join,
            Body::JoinAck => MessageType::JoinAck,
            Body::FitIns { .. } => MessageType::FitIns,
            Body::FitRes(_) => MessageType::FitRes,
            Body::EvalIns { .. } => MessageType::EvalIns,
            Body::EvalRes(_) => MessageType::EvalRes,
            Body::Done => MessageType::Done,
            Body::Error(_) => MessageType::Error,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = vec![self.kind() as u8];
        out.extend_from_slice(&self.round.to_be_bytes());
        match &self.body {
            Body::Join { client_id } => out.extend_from_slice(&client_id.to_be_bytes()),
            Body::JoinAck | Body::Done => {}
            Body::FitIns { params, config } => {
                out.extend_from_slice(&to_u32(config.local_epochs, "local_epochs")?.to_be_bytes());
                out.extend_from_slice(&to_u32(config.batch_size, "batch_size")?.to_be_bytes());
                out.extend_from_slice(&config.learning_rate.to_be_bytes());
                out.extend_from_slice(&config.shuffle_seed.to_be_bytes());
                params.write_to(&mut out);
            }
            Body::FitRes(r) => {
                out.extend_from_slice(&r.client_id.to_be_bytes());
                out.extend_from_slice(&r.num_examples.to_be_bytes());
                out.extend_from_slice(&r.train_loss.to_be_bytes());
                r.params.write_to(&mut out);
            }
            Body::EvalIns { params } => params.write_to(&mut out),
            Body::EvalRes(r) => {
                out.extend_from_slice(&r.client_id.to_be_bytes());
                out.extend_from_slice(&r.num_examples.to_be_bytes());
                out.extend_from_slice(&r.loss.to_be_bytes());
                out.extend_from_slice(&to_u32(r.confusion.num_classes(), "num_classes")?.to_be_bytes());
                for c in r.confusion.flat() {
                    out.extend_from_slice(&c.to_be_bytes());
                }
            }
            Body::Error(text) => {
                out.extend_from_slice(&to_u32(text.len(), "error text")?.to_be_bytes());
                out.extend_from_slice(text.as_bytes());
            }
        }
        if out.len() > MAX_FRAME_LEN as usize {
            return Err(Error::Protocol(format!("payload of {} bytes exceeds frame limit", out.len())));
        }
        Ok(out)
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes: payload, pos: 0 };
        let tag = r.u8()?;
        let kind = MessageType::from_tag(tag).ok_or_else(|| Error::Protocol(format!("unknown message tag {tag}")))?;
        let round = r.u32()?;
        let body = match kind {
            MessageType::Join => Body::Join { client_id: r.u32()? },
            MessageType::JoinAck => Body::JoinAck,
            MessageType::FitIns => {
                let config = TrainConfig {
                    local_epochs: r.u32()? as usize,
                    batch_size: r.u32()? as usize,
                    learning_rate: r.f64()?,
                    shuffle_seed: r.u64()?,
                };
                Body::FitIns {
                    params: r.params()?,
                    config,
                }
            }
            MessageType::FitRes => Body::FitRes(FitResult {
                client_id: r.u32()?,
                num_examples: r.u64()?,
                train_loss: r.f64()?,
                params: r.params()?,
            }),
            MessageType::EvalIns => Body::EvalIns { params: r.params()? },
            MessageType::EvalRes => {
                let client_id = r.u32()?;
                let num_examples = r.u64()?;
                let loss = r.f64()?;
                let c = r.u32()? as usize;
                let cells = c
                    .checked_mul(c)
                    .filter(|n| n.saturating_mul(8) <= r.remaining())
                    .ok_or_else(|| Error::Protocol("confusion matrix larger than payload".into()))?;
                let counts = (0..cells).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                Body::EvalRes(EvalResult {
                    client_id,
                    loss,
                    num_examples,
                    confusion: ConfusionMatrix::from_flat(c, counts).map_err(|e| Error::Protocol(e.to_string()))?,
                })
            }
            MessageType::Done => Body::Done,
            MessageType::Error => {
                let n = r.u32()? as usize;
                let text = std::str::from_utf8(r.take(n)?)
                    .map_err(|e| Error::Protocol(format!("error text is not UTF-8: {e}")))?;
                Body::Error(text.to_string())
            }
        };
        if r.remaining() != 0 {
            return Err(Error::Protocol(format!("{} trailing bytes after {kind:?}", r.remaining())));
        }
        Ok(Self { round, body })
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Protocol(format!("{what} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Protocol("truncated payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_be_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_be_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_be_bytes)
    }

    fn params(&mut self) -> Result<Params> {
        let (p, used) = Params::read_from(&self.bytes[self.pos..]).map_err(|e| Error::Protocol(e.to_string()))?;
        self.pos += used;
        Ok(p)
    }
}

/// Writes one frame and returns the number of bytes written.
pub fn write_frame<W: Write + ?Sized>(w: &mut W, msg: &Message) -> Result<usize> {
    let payload = msg.encode()?;
    let mut frame = Vec::with_capacity(4 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}

/// Reads one frame. `Ok(None)` means the peer closed the stream cleanly
/// between frames.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream closed inside frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Protocol("stream closed inside frame".into()),
        _ => e.into(),
    })?;
    Message::decode(&payload).map(Some)
}

/// Size on the wire of `msg`, header included.
pub fn frame_len(msg: &Message) -> Result<usize> {
    Ok(4 + msg.encode()?.len())
}
