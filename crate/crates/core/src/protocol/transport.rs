//! Byte-stream transports: TCP, in-memory pipes, and counting wrappers.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;

use crate::monitor::Traffic;

pub type BoxRead = Box<dyn Read + Send>;
pub type BoxWrite = Box<dyn Write + Send>;

/// A duplex stream that can be split into independently owned halves.
pub trait Connection: Send {
    fn split(self: Box<Self>) -> io::Result<(BoxRead, BoxWrite)>;
}

impl Connection for TcpStream {
    fn split(self: Box<Self>) -> io::Result<(BoxRead, BoxWrite)> {
        self.set_nodelay(true)?;
        let reader = self.try_clone()?;
        Ok((Box::new(reader), Box::new(*self)))
    }
}

/// One end of an in-memory duplex pipe.
pub struct PipeEnd {
    reader: PipeReader,
    writer: PipeWriter,
}

pub struct PipeReader {
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
}

pub struct PipeWriter {
    tx: Sender<Vec<u8>>,
}

/// Creates a connected pair. Dropping one end's writer signals end of
/// stream to the other end's reader.
pub fn pipe() -> (PipeEnd, PipeEnd) {
    let (a_tx, a_rx) = mpsc::channel();
    let (b_tx, b_rx) = mpsc::channel();
    let end = |tx, rx| PipeEnd {
        reader: PipeReader {
            rx,
            buf: Vec::new(),
            pos: 0,
        },
        writer: PipeWriter { tx },
    };
    (end(a_tx, b_rx), end(b_tx, a_rx))
}

impl PipeEnd {
    pub fn into_halves(self) -> (PipeReader, PipeWriter) {
        (self.reader, self.writer)
    }
}

impl Connection for PipeEnd {
    fn split(self: Box<Self>) -> io::Result<(BoxRead, BoxWrite)> {
        Ok((Box::new(self.reader), Box::new(self.writer)))
    }
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if out.is_empty() {
            return Ok(0);
        }
        while self.pos == self.buf.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> io::Result<usize> {
        if data.is_empty() {
            return Ok(0);
        }
        self.tx
            .send(data.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "pipe closed"))?;
        Ok(data.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Adds every byte that passes through to a [`Traffic`] counter.
pub struct Counted<S> {
    inner: S,
    traffic: Arc<Traffic>,
}

impl<S> Counted<S> {
    pub fn new(inner: S, traffic: Arc<Traffic>) -> Self {
        Self { inner, traffic }
    }
}

impl<S: Read> Read for Counted<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.traffic.add_in(n as u64);
        Ok(n)
    }
}

impl<S: Write> Write for Counted<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.traffic.add_out(n as u64);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Splits `conn` and wraps both halves in counters.
pub fn split_counted(conn: Box<dyn Connection>, traffic: &Arc<Traffic>) -> io::Result<(BoxRead, BoxWrite)> {
    let (r, w) = conn.split()?;
    Ok((
        Box::new(Counted::new(r, traffic.clone())),
        Box::new(Counted::new(w, traffic.clone())),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipe_carries_bytes_both_ways_and_signals_eof() {
        let (a, b) = pipe();
        let (mut ar, mut aw) = a.into_halves();
        let (mut br, bw) = b.into_halves();
        aw.write_all(b"hello").unwrap();
        let mut got = [0u8; 3];
        br.read_exact(&mut got).unwrap();
        assert_eq!(&got, b"hel");
        drop(bw);
        let mut rest = Vec::new();
        ar.read_to_end(&mut rest).unwrap();
        assert!(rest.is_empty());
        drop(br);
        assert!(aw.write_all(b"x").is_err());
    }

    #[test]
    fn counters_track_both_directions() {
        let traffic = Traffic::new();
        let (a, b) = pipe();
        let (ar, aw) = split_counted(Box::new(a), &traffic).unwrap();
        let (mut br, mut bw) = b.into_halves();
        let (mut ar, mut aw) = (ar, aw);
        aw.write_all(&[1; 10]).unwrap();
        let mut buf = [0u8; 10];
        br.read_exact(&mut buf).unwrap();
        bw.write_all(&[2; 4]).unwrap();
        ar.read_exact(&mut buf[..4]).unwrap();
        assert_eq!((traffic.bytes_out(), traffic.bytes_in()), (10, 4));
    }
}
