use std::io::{self, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::wire::{self, Message, Response, ResponseBody, Status, Tensor, WireError};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("timed out after {waited:?} waiting for key {key:?}")]
    Timeout { key: String, waited: Duration },
    #[error("connection lost: {0}")]
    ConnectionLost(#[source] io::Error),
    #[error("protocol error: {0}")]
    Protocol(#[source] WireError),
    #[error("broker answered {0:?}")]
    Server(Status),
}

impl From<WireError> for ClientError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Io(io) => ClientError::ConnectionLost(io),
            WireError::TruncatedFrame => ClientError::ConnectionLost(io::ErrorKind::UnexpectedEof.into()),
            other => ClientError::Protocol(other),
        }
    }
}

/// Single-connection broker client. Not shareable across threads; open one
/// client per thread instead.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    buf: Vec<u8>,
}

impl Client {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).map_err(ClientError::ConnectionLost)?;
        Self::from_stream(stream)
    }

    pub fn connect_timeout(addr: &SocketAddr, timeout: Duration) -> Result<Self, ClientError> {
        let stream = TcpStream::connect_timeout(addr, timeout).map_err(ClientError::ConnectionLost)?;
        Self::from_stream(stream)
    }

    fn from_stream(stream: TcpStream) -> Result<Self, ClientError> {
        stream.set_nodelay(true).map_err(ClientError::ConnectionLost)?;
        let writer = stream.try_clone().map_err(ClientError::ConnectionLost)?;
        Ok(Self { reader: BufReader::new(stream), writer, buf: Vec::new() })
    }

    fn request(&mut self, msg: &Message) -> Result<Response, ClientError> {
        self.buf = wire::encode_message(msg)?;
        self.writer.write_all(&self.buf).map_err(ClientError::ConnectionLost)?;
        Ok(wire::read_response(&mut self.reader)?)
    }

    fn expect_ok(resp: Response) -> Result<(), ClientError> {
        match resp.status {
            Status::Ok => Ok(()),
            s => Err(ClientError::Server(s)),
        }
    }

    pub fn put(&mut self, key: &str, tensor: Tensor) -> Result<(), ClientError> {
        let resp = self.request(&Message::Put { key: key.to_owned(), tensor })?;
        Self::expect_ok(resp)
    }

    /// `Ok(None)` on a miss.
    pub fn get(&mut self, key: &str) -> Result<Option<Tensor>, ClientError> {
        let resp = self.request(&Message::Get { key: key.to_owned() })?;
        match (resp.status, resp.body) {
            (Status::Ok, ResponseBody::Tensor(t)) => Ok(Some(t)),
            (Status::NotFound, _) => Ok(None),
            (Status::Ok, _) => Err(ClientError::Protocol(WireError::Malformed("GET/OK without payload"))),
            (s, _) => Err(ClientError::Server(s)),
        }
    }

    pub fn exists(&mut self, key: &str) -> Result<bool, ClientError> {
        let resp = self.request(&Message::Exists { key: key.to_owned() })?;
        match (resp.status, resp.body) {
            (Status::Ok, ResponseBody::Exists(flag)) => Ok(flag),
            (Status::Ok, _) => Err(ClientError::Protocol(WireError::Malformed("EXISTS/OK without flag"))),
            (s, _) => Err(ClientError::Server(s)),
        }
    }

    pub fn delete(&mut self, key: &str) -> Result<(), ClientError> {
        let resp = self.request(&Message::Del { key: key.to_owned() })?;
        Self::expect_ok(resp)
    }

    pub fn ping(&mut self) -> Result<(), ClientError> {
        let resp = self.request(&Message::Ping { key: "ping".to_owned() })?;
        Self::expect_ok(resp)
    }

    /// Issues GET every `interval` until the key appears or `timeout` elapses.
    /// The key is left in place.
    pub fn poll(&mut self, key: &str, interval: Duration, timeout: Duration) -> Result<Tensor, ClientError> {
        self.poll_with(key, interval, timeout, || Ok(()))
    }

    /// Like [`Client::poll`], but calls `between` after every miss; an error
    /// from it aborts the poll.
    pub fn poll_with<F>(
        &mut self,
        key: &str,
        interval: Duration,
        timeout: Duration,
        mut between: F,
    ) -> Result<Tensor, ClientError>
    where
        F: FnMut() -> Result<(), ClientError>,
    {
        let start = Instant::now();
        loop {
            if let Some(t) = self.get(key)? {
                return Ok(t);
            }
            between()?;
            let waited = start.elapsed();
            if waited >= timeout {
                return Err(ClientError::Timeout { key: key.to_owned(), waited });
            }
            thread::sleep(interval.min(timeout - waited));
        }
    }
}
