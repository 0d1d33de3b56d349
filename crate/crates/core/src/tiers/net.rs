//! Networked mode: edge and cloud servers over TCP plus a trace replayer.
//!
//! Each accepted connection gets its own thread. The only state shared
//! between edge connections is the [`SharedCache`]; each edge connection
//! opens its own upstream connection to the cloud on the first miss.
//! Links are not shaped here; real deployments shape them externally.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::BytesMut;
use log::{debug, warn};
use thiserror::Error;

use super::{CloudBackend, ServedFrom};
use crate::descriptor::TaskKind;
use crate::simcache::{Lookup, SharedCache};
use crate::wire::{self, Decoder, Message, ProtocolError, RequestMessage, ResponseMessage};
use crate::workload::Trace;

pub const DEFAULT_EDGE_PORT: u16 = 7401;
pub const DEFAULT_CLOUD_PORT: u16 = 7402;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("peer closed the connection")]
    Closed,
    #[error("unexpected message: {0}")]
    Unexpected(String),
    #[error(transparent)]
    Cache(#[from] crate::simcache::CacheError),
}

/// A framed, blocking message stream.
pub struct Connection {
    stream: TcpStream,
    decoder: Decoder,
    out: BytesMut,
    buf: Box<[u8]>,
}

impl Connection {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Connection {
            stream,
            decoder: Decoder::new(),
            out: BytesMut::new(),
            buf: vec![0u8; 64 * 1024].into_boxed_slice(),
        })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    pub fn send(&mut self, message: &Message) -> io::Result<()> {
        self.out.clear();
        wire::encode_into(message, &mut self.out);
        self.stream.write_all(&self.out)
    }

    /// Next message, or `None` on a clean close between frames.
    pub fn recv(&mut self) -> Result<Option<Message>, NetError> {
        loop {
            if let Some(m) = self.decoder.next_message()? {
                return Ok(Some(m));
            }
            let n = self.stream.read(&mut self.buf)?;
            if n == 0 {
                self.decoder.finish()?;
                return Ok(None);
            }
            self.decoder.push(&self.buf[..n]);
        }
    }

    fn recv_required(&mut self) -> Result<Message, NetError> {
        self.recv()?.ok_or(NetError::Closed)
    }
}

/// Handle to a server running on background threads.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting new connections. Open connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the acceptor exits.
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_accepting();
        }
    }
}

fn spawn_server<F>(listener: TcpListener, handler: F) -> io::Result<ServerHandle>
where
    F: Fn(TcpStream) -> Result<(), NetError> + Send + Sync + 'static,
{
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let handler = Arc::new(handler);
    let stop_flag = stop.clone();
    let acceptor = thread::spawn(move || {
        for stream in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let handler = handler.clone();
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handler(stream) {
                    warn!("connection {peer:?} ended with error: {e}");
                }
            });
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        acceptor: Some(acceptor),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CloudOptions {
    /// Sleep for the configured `cloud_compute_ms` before answering.
    pub emulate_compute: bool,
}

pub fn spawn_cloud(
    listener: TcpListener,
    backend: Arc<CloudBackend>,
    options: CloudOptions,
) -> io::Result<ServerHandle> {
    spawn_server(listener, move |stream| {
        serve_cloud_connection(stream, &backend, options)
    })
}

fn serve_cloud_connection(
    stream: TcpStream,
    backend: &CloudBackend,
    options: CloudOptions,
) -> Result<(), NetError> {
    let mut conn = Connection::new(stream)?;
    while let Some(message) = conn.recv()? {
        let Message::Request(req) = message else {
            return Err(NetError::Unexpected("response sent to the cloud".into()));
        };
        let kind = req.descriptor.kind();
        if options.emulate_compute {
            let ms = backend.compute().get(kind).cloud_compute_ms;
            thread::sleep(Duration::from_secs_f64(ms / 1000.0));
        }
        let result = backend.result_for(&req.descriptor);
        debug!("cloud answered request {}", req.request_id);
        conn.send(&Message::Response(ResponseMessage {
            request_id: req.request_id,
            served_from: ServedFrom::Cloud,
            result,
        }))?;
    }
    Ok(())
}

pub fn spawn_edge(
    listener: TcpListener,
    cloud_addr: SocketAddr,
    cache: SharedCache,
) -> io::Result<ServerHandle> {
    let epoch = Instant::now();
    spawn_server(listener, move |stream| {
        serve_edge_connection(stream, cloud_addr, &cache, epoch)
    })
}

fn serve_edge_connection(
    stream: TcpStream,
    cloud_addr: SocketAddr,
    cache: &SharedCache,
    epoch: Instant,
) -> Result<(), NetError> {
    let mut client = Connection::new(stream)?;
    let mut cloud: Option<Connection> = None;
    let now_us = || epoch.elapsed().as_micros() as u64;
    while let Some(message) = client.recv()? {
        let Message::Request(req) = message else {
            return Err(NetError::Unexpected("response sent to the edge".into()));
        };
        let found = {
            let mut guard = cache.lock();
            let now = now_us();
            guard.lookup(&req.descriptor, now)?
        };
        let response = match found {
            Lookup::Hit { result, .. } => ResponseMessage {
                request_id: req.request_id,
                served_from: ServedFrom::Edge,
                result,
            },
            Lookup::Miss => {
                let upstream = match &mut cloud {
                    Some(c) => c,
                    None => cloud.insert(Connection::connect(cloud_addr)?),
                };
                let descriptor = req.descriptor.clone();
                upstream.send(&Message::Request(req.clone()))?;
                let Message::Response(resp) = upstream.recv_required()? else {
                    return Err(NetError::Unexpected(
                        "request received from the cloud".into(),
                    ));
                };
                if resp.request_id != req.request_id {
                    return Err(NetError::Unexpected(format!(
                        "cloud answered {} for {}",
                        resp.request_id, req.request_id
                    )));
                }
                {
                    let mut guard = cache.lock();
                    let now = now_us();
                    guard.insert(descriptor, resp.result.clone(), now);
                }
                ResponseMessage {
                    request_id: req.request_id,
                    served_from: ServedFrom::Cloud,
                    result: resp.result,
                }
            }
        };
        client.send(&Message::Response(response))?;
    }
    Ok(())
}

/// One request as observed by the replaying client.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRecord {
    pub request_id: u64,
    pub user_id: u32,
    pub kind: TaskKind,
    pub object_id: u64,
    pub issued_at: u64,
    /// Wall-clock round trip.
    pub latency_us: u64,
    pub served_from: ServedFrom,
}

/// Sends every trace request to the edge in trace order, one at a time.
pub fn replay(edge_addr: impl ToSocketAddrs, trace: &Trace) -> Result<Vec<ReplayRecord>, NetError> {
    let mut conn = Connection::connect(edge_addr)?;
    let mut records = Vec::with_capacity(trace.len());
    for entry in trace.iter() {
        let req = &entry.request;
        let start = Instant::now();
        conn.send(&Message::Request(RequestMessage {
            request_id: req.request_id,
            user_id: req.user_id,
            descriptor: req.descriptor.clone(),
        }))?;
        let Message::Response(resp) = conn.recv_required()? else {
            return Err(NetError::Unexpected(
                "request received from the edge".into(),
            ));
        };
        if resp.request_id != req.request_id {
            return Err(NetError::Unexpected(format!(
                "edge answered {} for {}",
                resp.request_id, req.request_id
            )));
        }
        records.push(ReplayRecord {
            request_id: req.request_id,
            user_id: req.user_id,
            kind: req.kind,
            object_id: entry.object_id,
            issued_at: req.issued_at,
            latency_us: start.elapsed().as_micros() as u64,
            served_from: resp.served_from,
        });
    }
    Ok(records)
}
