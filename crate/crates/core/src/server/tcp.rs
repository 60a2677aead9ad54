//! TCP front end: one session per connection, newline-delimited frames.
//!
//! Each connection gets a reader thread. `wait_for_mentions` requests run
//! on their own thread so a long poll blocks only that request; every other
//! request is answered inline, in order. Responses share one writer and are
//! matched by id on the client side.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;

use crate::error::ProtocolError;
use crate::model::AgentId;

use super::wire::{self, RequestFrame, ResponseFrame};
use super::{Server, ServerError};

/// Longest accepted request line.
pub const MAX_FRAME_BYTES: u64 = 1 << 20;

pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    server: Arc<Server>,
}

impl TcpServer {
    pub fn bind(server: Arc<Server>, addr: &str) -> Result<Self, ServerError> {
        let listener = TcpListener::bind(addr).map_err(|source| ServerError::Bind {
            addr: addr.to_owned(),
            source,
        })?;
        let local = listener.local_addr().map_err(|source| ServerError::Bind {
            addr: addr.to_owned(),
            source,
        })?;
        let stop = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(Mutex::new(Vec::new()));
        let accept = {
            let stop = stop.clone();
            let connections = connections.clone();
            let server = server.clone();
            std::thread::Builder::new()
                .name("a2a-accept".into())
                .spawn(move || accept_loop(listener, server, stop, connections))
                .expect("spawn accept thread")
        };
        Ok(Self {
            addr: local,
            stop,
            accept: Some(accept),
            connections,
            server,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }

    /// Stops accepting, drops every live session and flushes persistence.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for c in self.connections.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Err(e) = self.server.sync() {
            tracing::error!(error = %e, "failed to flush persistence on shutdown");
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
) {
    static SESSIONS: AtomicU64 = AtomicU64::new(0);
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            let mut conns = connections.lock();
            conns.retain(|c| c.peer_addr().is_ok());
            conns.push(clone);
        }
        let n = SESSIONS.fetch_add(1, Ordering::Relaxed) + 1;
        let server = server.clone();
        let spawned = std::thread::Builder::new()
            .name(format!("a2a-session-{n}"))
            .spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = serve_session(server, stream) {
                    tracing::debug!(?peer, error = %e, "session ended with error");
                }
            });
        if let Err(e) = spawned {
            tracing::error!(error = %e, "cannot spawn session thread");
        }
    }
}

type Writer = Arc<Mutex<TcpStream>>;

fn send(writer: &Writer, frame: &ResponseFrame) -> std::io::Result<()> {
    let bytes = wire::encode_frame(frame);
    let mut w = writer.lock();
    w.write_all(&bytes)?;
    w.flush()
}

fn serve_session(server: Arc<Server>, stream: TcpStream) -> std::io::Result<()> {
    let peer = stream.peer_addr()?;
    let writer: Writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = BufReader::new(stream);
    let mut agent: Option<AgentId> = None;
    let mut observer = false;
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = (&mut reader)
            .take(MAX_FRAME_BYTES + 1)
            .read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        if n as u64 > MAX_FRAME_BYTES {
            send(
                &writer,
                &ResponseFrame::err(0, ProtocolError::bad_request("frame too large")),
            )?;
            break;
        }
        let text = String::from_utf8_lossy(&line);
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        let req: RequestFrame = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => {
                send(
                    &writer,
                    &ResponseFrame::err(0, ProtocolError::bad_request(format!("bad frame: {e}"))),
                )?;
                continue;
            }
        };
        let Some(me) = agent.clone() else {
            if req.op != wire::OP_HELLO {
                send(
                    &writer,
                    &ResponseFrame::err(
                        req.id,
                        ProtocolError::bad_request("first frame must be hello"),
                    ),
                )?;
                break;
            }
            match wire::handle_hello(&server, req.params) {
                Ok(h) => {
                    tracing::info!(%peer, agent = %h.agent, observer = h.observer, "session accepted");
                    agent = Some(h.agent);
                    observer = h.observer;
                    send(&writer, &ResponseFrame::ok(req.id, h.result))?;
                }
                Err(e) => {
                    send(&writer, &ResponseFrame::err(req.id, e))?;
                    break;
                }
            }
            continue;
        };
        if observer && !wire::OBSERVER_OPS.contains(&req.op.as_str()) {
            let e = ProtocolError::bad_request(format!("observer sessions cannot {}", req.op));
            send(&writer, &ResponseFrame::err(req.id, e))?;
            continue;
        }
        if req.op == "wait_for_mentions" {
            let server = server.clone();
            let writer = writer.clone();
            std::thread::spawn(move || {
                let frame = match wire::dispatch(&server, &me, &req.op, req.params) {
                    Ok(v) => ResponseFrame::ok(req.id, v),
                    Err(e) => ResponseFrame::err(req.id, e),
                };
                let _ = send(&writer, &frame);
            });
            continue;
        }
        let frame = match wire::dispatch(&server, &me, &req.op, req.params) {
            Ok(v) => ResponseFrame::ok(req.id, v),
            Err(e) => ResponseFrame::err(req.id, e),
        };
        send(&writer, &frame)?;
    }
    if let Some(a) = agent {
        tracing::info!(%peer, agent = %a, "session closed");
    }
    Ok(())
}
