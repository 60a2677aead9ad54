use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::error::{ErrorCode, ProtocolError, ProtocolResult};
use crate::model::{AgentId, AgentRegistration, Message, MessageKind, ThreadId, Transcript};
use crate::server::wire::{self, RegisterInfo, RequestFrame, ResponseFrame};

use super::{params, A2aApi};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Connected,
    Closed,
}

type Pending = Mutex<HashMap<u64, mpsc::Sender<ResponseFrame>>>;

struct Inner {
    agent: AgentId,
    endpoint: String,
    writer: Mutex<TcpStream>,
    next_id: AtomicU64,
    pending: Pending,
    closed: AtomicBool,
    reader: Mutex<Option<JoinHandle<()>>>,
}

/// One TCP connection authenticated as one agent.
///
/// `call` may be used concurrently from several threads; responses are
/// matched to requests by id, so they may complete out of order.
#[derive(Clone)]
pub struct Session {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("agent", &self.inner.agent)
            .field("endpoint", &self.inner.endpoint)
            .field("state", &self.state())
            .finish()
    }
}

fn lost(why: impl Into<String>) -> ProtocolError {
    ProtocolError::new(ErrorCode::ConnectionLost, why)
}

impl Session {
    /// Connects and performs the `hello` handshake. With `register` set the
    /// server registers the agent during the handshake.
    pub fn connect(
        endpoint: &str,
        agent: &AgentId,
        register: Option<RegisterInfo>,
    ) -> ProtocolResult<Self> {
        let mut hello = json!({ "agent": agent });
        if let Some(info) = register {
            hello["register"] = serde_json::to_value(info).expect("register info serializes");
        }
        Self::open(endpoint, agent, hello)
    }

    /// Read-only session: `list_agents` and `get_transcript` only. `agent`
    /// names the observer in server logs and is never registered.
    pub fn observe(endpoint: &str, agent: &AgentId) -> ProtocolResult<Self> {
        Self::open(endpoint, agent, json!({ "agent": agent, "observe": true }))
    }

    fn open(endpoint: &str, agent: &AgentId, hello: Value) -> ProtocolResult<Self> {
        let fail = |e: std::io::Error| {
            ProtocolError::new(ErrorCode::ConnectFailed, format!("{endpoint}: {e}"))
        };
        let addrs: Vec<_> = endpoint.to_socket_addrs().map_err(fail)?.collect();
        let mut last = None;
        let mut stream = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, Duration::from_secs(5)) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = Some(e),
            }
        }
        let stream = stream.ok_or_else(|| {
            fail(last.unwrap_or_else(|| std::io::Error::other("no address resolved")))
        })?;
        let _ = stream.set_nodelay(true);
        let read_half = stream.try_clone().map_err(fail)?;
        let inner = Arc::new(Inner {
            agent: agent.clone(),
            endpoint: endpoint.to_owned(),
            writer: Mutex::new(stream),
            next_id: AtomicU64::new(1),
            pending: Mutex::new(HashMap::new()),
            closed: AtomicBool::new(false),
            reader: Mutex::new(None),
        });
        let reader = {
            let inner = Arc::downgrade(&inner);
            std::thread::Builder::new()
                .name(format!("a2a-client-{agent}"))
                .spawn(move || read_loop(inner, read_half))
                .map_err(fail)?
        };
        *inner.reader.lock() = Some(reader);
        let session = Session { inner };

        if let Err(e) = session.call(wire::OP_HELLO, hello) {
            session.close();
            return Err(e);
        }
        Ok(session)
    }

    pub fn endpoint(&self) -> &str {
        &self.inner.endpoint
    }

    pub fn state(&self) -> SessionState {
        if self.inner.closed.load(Ordering::SeqCst) {
            SessionState::Closed
        } else {
            SessionState::Connected
        }
    }

    /// Id the next request will carry.
    pub fn next_request_id(&self) -> u64 {
        self.inner.next_id.load(Ordering::SeqCst)
    }

    /// Issues one request and blocks for its response.
    pub fn call(&self, op: &str, params: Value) -> ProtocolResult<Value> {
        if self.state() == SessionState::Closed {
            return Err(lost("session is closed"));
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel();
        self.inner.pending.lock().insert(id, tx);
        let frame = RequestFrame {
            id,
            op: op.to_owned(),
            params,
        };
        let bytes = wire::encode_frame(&frame);
        let written = {
            let mut w = self.inner.writer.lock();
            w.write_all(&bytes).and_then(|_| w.flush())
        };
        if let Err(e) = written {
            self.inner.pending.lock().remove(&id);
            return Err(lost(e.to_string()));
        }
        match rx.recv() {
            Ok(frame) => frame.into_result(),
            Err(_) => Err(lost("connection closed before response")),
        }
    }

    fn call_as<T: DeserializeOwned>(&self, op: &str, params: Value) -> ProtocolResult<T> {
        let v = self.call(op, params)?;
        serde_json::from_value(v)
            .map_err(|e| ProtocolError::bad_request(format!("unexpected {op} result: {e}")))
    }

    pub fn register_agent(&self, reg: &AgentRegistration) -> ProtocolResult<AgentId> {
        let v = self.call(
            "register_agent",
            json!({ "id": reg.id, "description": reg.description, "role": reg.role }),
        )?;
        serde_json::from_value(v["agent"].clone())
            .map_err(|e| ProtocolError::bad_request(e.to_string()))
    }

    /// Closes the connection; in-flight calls fail with `CONNECTION_LOST`.
    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        let _ = self.inner.writer.lock().shutdown(Shutdown::Both);
        let handle = self.inner.reader.lock().take();
        if let Some(h) = handle {
            if h.thread().id() != std::thread::current().id() {
                let _ = h.join();
            }
        }
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        let _ = self.writer.get_mut().shutdown(Shutdown::Both);
    }
}

fn read_loop(weak: Weak<Inner>, stream: TcpStream) {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        let Some(inner) = weak.upgrade() else {
            return;
        };
        let frame: ResponseFrame = match serde_json::from_str(line.trim()) {
            Ok(f) => f,
            Err(e) => {
                tracing::warn!(agent = %inner.agent, error = %e, "unparseable response frame");
                continue;
            }
        };
        let tx = inner.pending.lock().remove(&frame.id);
        match tx {
            Some(tx) => {
                let _ = tx.send(frame);
            }
            None => {
                tracing::warn!(agent = %inner.agent, id = frame.id, "response for unknown request")
            }
        }
    }
    let Some(inner) = weak.upgrade() else {
        return;
    };
    inner.closed.store(true, Ordering::SeqCst);
    let drained: Vec<_> = inner.pending.lock().drain().collect();
    for (id, tx) in drained {
        let _ = tx.send(ResponseFrame::err(id, lost("connection lost")));
    }
}

impl A2aApi for Session {
    fn agent(&self) -> &AgentId {
        &self.inner.agent
    }

    fn list_agents(&self) -> ProtocolResult<Vec<AgentRegistration>> {
        self.call_as("list_agents", json!({}))
    }

    fn create_thread(&self, participants: &[AgentId]) -> ProtocolResult<ThreadId> {
        let v = self.call("create_thread", params::create_thread(participants))?;
        serde_json::from_value(v["thread"].clone())
            .map_err(|e| ProtocolError::bad_request(e.to_string()))
    }

    fn add_participant(&self, thread: &ThreadId, agent: &AgentId) -> ProtocolResult<()> {
        self.call("add_participant", params::membership(thread, agent))
            .map(|_| ())
    }

    fn remove_participant(&self, thread: &ThreadId, agent: &AgentId) -> ProtocolResult<()> {
        self.call("remove_participant", params::membership(thread, agent))
            .map(|_| ())
    }

    fn send_message(
        &self,
        thread: &ThreadId,
        kind: MessageKind,
        body: &str,
        mentions: &[AgentId],
    ) -> ProtocolResult<Message> {
        self.call_as("send_message", params::send(thread, kind, body, mentions))
    }

    fn wait_for_mentions(
        &self,
        thread: Option<&ThreadId>,
        timeout_ms: Option<u64>,
    ) -> ProtocolResult<Vec<Message>> {
        self.call_as("wait_for_mentions", params::wait(thread, timeout_ms))
    }

    fn close_thread(&self, thread: &ThreadId, summary: &str) -> ProtocolResult<()> {
        self.call("close_thread", params::close(thread, summary))
            .map(|_| ())
    }

    fn get_transcript(&self, thread: &ThreadId) -> ProtocolResult<Transcript> {
        self.call_as("get_transcript", params::thread(thread))
    }
}
