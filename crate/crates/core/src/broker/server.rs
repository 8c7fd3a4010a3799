use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};
use thiserror::Error;

use super::store::{Store, StoreStats};
use crate::wire::{self, Message, Response, Status, WireError};

const ACCEPT_IDLE: Duration = Duration::from_millis(1);

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
}

type Connections = Arc<Mutex<HashMap<u64, TcpStream>>>;

/// A broker running on a background thread.
pub struct BrokerHandle {
    addr: SocketAddr,
    store: Arc<Store>,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl BrokerHandle {
    /// Binds `bind` (port 0 picks a free port) and starts serving.
    pub fn spawn(bind: &str, max_connections: usize) -> Result<Self, BrokerError> {
        let listener = bind_listener(bind)?;
        let addr = listener.local_addr().map_err(|source| BrokerError::BindFailure {
            addr: bind.to_owned(),
            source,
        })?;
        let store = Arc::new(Store::new());
        let shutdown = Arc::new(AtomicBool::new(false));
        let thread = {
            let (store, shutdown) = (store.clone(), shutdown.clone());
            thread::Builder::new()
                .name("broker-accept".into())
                .spawn(move || accept_loop(listener, store, max_connections, shutdown))
                .expect("spawn broker thread")
        };
        Ok(Self { addr, store, shutdown, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn shutdown(mut self) -> StoreStats {
        self.stop();
        self.store.stats()
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn bind_listener(bind: &str) -> Result<TcpListener, BrokerError> {
    let fail = |source| BrokerError::BindFailure { addr: bind.to_owned(), source };
    let addrs: Vec<_> = bind.to_socket_addrs().map_err(fail)?.collect();
    let listener = TcpListener::bind(&addrs[..]).map_err(fail)?;
    listener.set_nonblocking(true).map_err(fail)?;
    Ok(listener)
}

/// Serves on the calling thread until `shutdown` becomes true, then returns
/// the final counters.
pub fn serve(
    bind: &str,
    max_connections: usize,
    shutdown: Arc<AtomicBool>,
) -> Result<(SocketAddr, StoreStats), BrokerError> {
    let listener = bind_listener(bind)?;
    let addr = listener.local_addr().expect("bound listener has an address");
    let store = Arc::new(Store::new());
    accept_loop(listener, store.clone(), max_connections, shutdown);
    Ok((addr, store.stats()))
}

fn accept_loop(
    listener: TcpListener,
    store: Arc<Store>,
    max_connections: usize,
    shutdown: Arc<AtomicBool>,
) {
    let live: Connections = Arc::new(Mutex::new(HashMap::new()));
    let active = Arc::new(AtomicUsize::new(0));
    let next_id = AtomicU64::new(0);
    let mut workers = Vec::new();

    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                if active.load(Ordering::SeqCst) >= max_connections {
                    warn!("refusing {peer}: connection limit {max_connections} reached");
                    let _ = stream.shutdown(Shutdown::Both);
                    continue;
                }
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let id = next_id.fetch_add(1, Ordering::Relaxed);
                if let Ok(clone) = stream.try_clone() {
                    live.lock().unwrap().insert(id, clone);
                }
                active.fetch_add(1, Ordering::SeqCst);
                let (store, live, active) = (store.clone(), live.clone(), active.clone());
                workers.push(thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, &store) {
                        debug!("connection {peer} closed: {e}");
                    }
                    live.lock().unwrap().remove(&id);
                    active.fetch_sub(1, Ordering::SeqCst);
                }));
                workers.retain(|w: &JoinHandle<()>| !w.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_IDLE),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(ACCEPT_IDLE);
            }
        }
    }

    for stream in live.lock().unwrap().values() {
        let _ = stream.shutdown(Shutdown::Both);
    }
    for w in workers {
        let _ = w.join();
    }
}

fn handle_connection(stream: TcpStream, store: &Store) -> Result<(), WireError> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let msg = match wire::read_message(&mut reader) {
            Ok(Some(msg)) => msg,
            Ok(None) => return Ok(()),
            Err(e @ WireError::Io(_)) => return Err(e),
            Err(e) => {
                // Framing is lost after a protocol error, so the connection ends here.
                let _ = wire::write_response(&mut writer, &Response::error(Status::BadRequest));
                let _ = writer.flush();
                return Err(e);
            }
        };
        let resp = apply(store, msg);
        wire::write_response(&mut writer, &resp)?;
        writer.flush()?;
    }
}

fn apply(store: &Store, msg: Message) -> Response {
    match msg {
        Message::Put { key, tensor } => {
            store.put(key, tensor);
            Response::ok()
        }
        Message::Get { key } => match store.get(&key) {
            Some(t) => Response::with_tensor((*t).clone()),
            None => Response::error(Status::NotFound),
        },
        Message::Exists { key } => Response::exists(store.exists(&key)),
        Message::Del { key } => {
            store.delete(&key);
            Response::ok()
        }
        Message::Ping { .. } => Response::ok(),
    }
}
