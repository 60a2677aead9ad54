//! The coordination server: agent registry, thread store, message routing,
//! per-agent mention cursors and long-poll mention delivery.
//!
//! Locking: the registry and the thread map are read-mostly `RwLock`s. Each
//! thread has its own mutex, so operations on one thread are serialized
//! while distinct threads proceed in parallel. Each agent has an inbox
//! mutex plus condvar. When both are needed the thread lock is always taken
//! first; a waiter only ever holds its own inbox lock.

mod clock;
pub mod persist;
pub mod tcp;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Condvar, Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ErrorCode, ProtocolError, ProtocolResult};
use crate::model::{
    parse_mentions, validate_body, AgentId, AgentRegistration, Message, MessageKind, ThreadHeader,
    ThreadId, ThreadStatus, Transcript,
};
use persist::{PersistError, ThreadEvent, ThreadFileHeader, ThreadLog};

pub use clock::{Clock, ClockMode};

pub const AUTO_CLOSE_SUMMARY: &str = "auto-closed: no participants";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerConfig {
    pub listen_address: String,
    pub wait_timeout_default_ms: u64,
    pub wait_timeout_max_ms: u64,
    pub clock: ClockMode,
    pub persistence_dir: Option<PathBuf>,
    /// Register unknown agents on `hello` instead of rejecting them.
    pub auto_register: bool,
    /// Seed for thread id generation; `None` draws random ids.
    pub id_seed: Option<u64>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen_address: "127.0.0.1:7070".into(),
            wait_timeout_default_ms: 30_000,
            wait_timeout_max_ms: 300_000,
            clock: ClockMode::Wall,
            persistence_dir: None,
            auto_register: true,
            id_seed: None,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if self.wait_timeout_default_ms == 0
            || self.wait_timeout_default_ms > self.wait_timeout_max_ms
        {
            return Err(ServerError::Config(format!(
                "need 0 < wait_timeout_default_ms ({}) <= wait_timeout_max_ms ({})",
                self.wait_timeout_default_ms, self.wait_timeout_max_ms
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

enum IdSource {
    Random,
    Seeded(Box<ChaCha8Rng>),
}

impl IdSource {
    fn next(&mut self) -> ThreadId {
        match self {
            IdSource::Random => ThreadId::from_bytes(*uuid::Uuid::new_v4().as_bytes()),
            IdSource::Seeded(rng) => ThreadId::from_bytes(rng.gen()),
        }
    }
}

#[derive(Default)]
struct Registry {
    agents: BTreeMap<AgentId, AgentRegistration>,
    ids: BTreeSet<AgentId>,
}

struct ThreadRecord {
    id: ThreadId,
    creator: AgentId,
    participants: BTreeSet<AgentId>,
    status: ThreadStatus,
    summary: Option<String>,
    messages: Vec<Arc<Message>>,
    log: Option<ThreadLog>,
}

impl ThreadRecord {
    fn next_seq(&self) -> u64 {
        self.messages.len() as u64 + 1
    }

    fn header(&self) -> ThreadHeader {
        ThreadHeader {
            thread: self.id.clone(),
            creator: self.creator.clone(),
            participants: self.participants.iter().cloned().collect(),
            status: self.status,
            summary: self.summary.clone(),
        }
    }

    fn ensure_open(&self) -> ProtocolResult<()> {
        if self.status == ThreadStatus::Closed {
            return Err(ProtocolError::new(
                ErrorCode::ThreadClosed,
                format!("thread {} is closed", self.id),
            ));
        }
        Ok(())
    }

    fn ensure_participant(&self, agent: &AgentId) -> ProtocolResult<()> {
        if !self.participants.contains(agent) {
            return Err(ProtocolError::new(
                ErrorCode::NotParticipant,
                format!("{agent} is not a participant of thread {}", self.id),
            ));
        }
        Ok(())
    }

    fn persist(&mut self, line: &[u8]) -> ProtocolResult<()> {
        if let Some(log) = self.log.as_mut() {
            log.append(line)
                .map_err(|e| ProtocolError::new(ErrorCode::Internal, e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct InboxState {
    pending: BTreeMap<(ThreadId, u64), Arc<Message>>,
    delivered: BTreeMap<ThreadId, u64>,
}

#[derive(Default)]
struct Inbox {
    state: Mutex<InboxState>,
    ready: Condvar,
}

/// Records every cursor movement and counts any that go backwards.
#[derive(Default)]
pub struct CursorAudit {
    advances: AtomicU64,
    regressions: AtomicU64,
}

impl CursorAudit {
    fn record(&self, old: u64, new: u64) {
        self.advances.fetch_add(1, Ordering::Relaxed);
        if new < old {
            self.regressions.fetch_add(1, Ordering::Relaxed);
            debug_assert!(false, "mention cursor moved backwards: {old} -> {new}");
        }
    }

    pub fn advances(&self) -> u64 {
        self.advances.load(Ordering::Relaxed)
    }

    pub fn regressions(&self) -> u64 {
        self.regressions.load(Ordering::Relaxed)
    }
}

fn set_cursor(audit: &CursorAudit, state: &mut InboxState, thread: &ThreadId, to: u64) {
    let slot = state.delivered.entry(thread.clone()).or_insert(0);
    audit.record(*slot, to);
    *slot = (*slot).max(to);
}

pub struct Server {
    config: ServerConfig,
    clock: Clock,
    ids: Mutex<IdSource>,
    registry: RwLock<Registry>,
    threads: RwLock<BTreeMap<ThreadId, Arc<Mutex<ThreadRecord>>>>,
    inboxes: RwLock<BTreeMap<AgentId, Arc<Inbox>>>,
    audit: CursorAudit,
}

impl Server {
    /// Builds a server, replaying the persistence directory when configured.
    pub fn new(config: ServerConfig) -> Result<Arc<Self>, ServerError> {
        let clock = Clock::for_mode(config.clock);
        Self::with_clock(config, clock)
    }

    pub fn with_clock(config: ServerConfig, clock: Clock) -> Result<Arc<Self>, ServerError> {
        config.validate()?;
        let ids = match config.id_seed {
            Some(seed) => IdSource::Seeded(Box::new(ChaCha8Rng::seed_from_u64(seed))),
            None => IdSource::Random,
        };
        let server = Server {
            config,
            clock,
            ids: Mutex::new(ids),
            registry: RwLock::new(Registry::default()),
            threads: RwLock::new(BTreeMap::new()),
            inboxes: RwLock::new(BTreeMap::new()),
            audit: CursorAudit::default(),
        };
        if let Some(dir) = server.config.persistence_dir.clone() {
            std::fs::create_dir_all(&dir).map_err(|source| PersistError::Io {
                path: dir.clone(),
                source,
            })?;
            server.restore(&dir)?;
        }
        Ok(Arc::new(server))
    }

    fn restore(&self, dir: &std::path::Path) -> Result<(), ServerError> {
        let mut registry = self.registry.write();
        let mut inboxes = self.inboxes.write();
        for reg in persist::load_agents(dir)? {
            registry.ids.insert(reg.id.clone());
            inboxes.entry(reg.id.clone()).or_default();
            registry.agents.insert(reg.id.clone(), reg);
        }
        let mut threads = self.threads.write();
        for loaded in persist::load_threads(dir)? {
            let max_seq = loaded.messages.len() as u64;
            // Mentions stored before the restart count as delivered.
            for agent in &loaded.participants {
                let inbox = inboxes.entry(agent.clone()).or_default();
                let mut st = inbox.state.lock();
                set_cursor(&self.audit, &mut st, &loaded.header.thread, max_seq);
            }
            let record = ThreadRecord {
                id: loaded.header.thread.clone(),
                creator: loaded.header.creator.clone(),
                participants: loaded.participants,
                status: loaded.status,
                summary: loaded.summary,
                messages: loaded.messages.into_iter().map(Arc::new).collect(),
                log: Some(ThreadLog::reopen(loaded.path)?),
            };
            threads.insert(record.id.clone(), Arc::new(Mutex::new(record)));
        }
        tracing::info!(
            agents = registry.agents.len(),
            threads = threads.len(),
            dir = %dir.display(),
            "restored persisted state"
        );
        Ok(())
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn audit(&self) -> &CursorAudit {
        &self.audit
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Moves an injected clock forward and wakes every blocked waiter so it
    /// can re-check its deadline.
    pub fn advance_clock_to(&self, t: u64) {
        if self.clock.set(t) {
            for inbox in self.inboxes.read().values() {
                let _guard = inbox.state.lock();
                inbox.ready.notify_all();
            }
        }
    }

    fn thread(&self, id: &ThreadId) -> ProtocolResult<Arc<Mutex<ThreadRecord>>> {
        self.threads
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ProtocolError::new(ErrorCode::UnknownThread, format!("no thread {id}")))
    }

    fn inbox(&self, agent: &AgentId) -> ProtocolResult<Arc<Inbox>> {
        self.inboxes
            .read()
            .get(agent)
            .cloned()
            .ok_or_else(|| unknown_agent(agent))
    }

    pub fn is_registered(&self, agent: &AgentId) -> bool {
        self.registry.read().ids.contains(agent)
    }

    fn ensure_registered(&self, agent: &AgentId) -> ProtocolResult<()> {
        if self.is_registered(agent) {
            Ok(())
        } else {
            Err(unknown_agent(agent))
        }
    }

    // ── registry ────────────────────────────────────────────────────

    pub fn register_agent(&self, reg: AgentRegistration) -> ProtocolResult<AgentId> {
        reg.validate()?;
        let mut registry = self.registry.write();
        if registry.ids.contains(&reg.id) {
            return Err(ProtocolError::new(
                ErrorCode::DuplicateAgentId,
                format!("agent {} is already registered", reg.id),
            ));
        }
        if let Some(dir) = &self.config.persistence_dir {
            persist::append_agent(dir, &reg)
                .map_err(|e| ProtocolError::new(ErrorCode::Internal, e.to_string()))?;
        }
        let id = reg.id.clone();
        self.inboxes.write().entry(id.clone()).or_default();
        registry.ids.insert(id.clone());
        registry.agents.insert(id.clone(), reg);
        tracing::debug!(agent = %id, "registered agent");
        Ok(id)
    }

    /// All registrations, sorted by id.
    pub fn list_agents(&self) -> Vec<AgentRegistration> {
        self.registry.read().agents.values().cloned().collect()
    }

    // ── threads ─────────────────────────────────────────────────────

    pub fn create_thread(
        &self,
        creator: &AgentId,
        participants: &[AgentId],
    ) -> ProtocolResult<ThreadId> {
        self.ensure_registered(creator)?;
        for p in participants {
            self.ensure_registered(p)?;
        }
        let mut members: BTreeSet<AgentId> = participants.iter().cloned().collect();
        members.insert(creator.clone());

        let mut threads = self.threads.write();
        let id = {
            let mut ids = self.ids.lock();
            loop {
                let candidate = ids.next();
                if !threads.contains_key(&candidate) {
                    break candidate;
                }
            }
        };
        let log = match &self.config.persistence_dir {
            Some(dir) => Some(
                ThreadLog::create(
                    dir,
                    &ThreadFileHeader {
                        thread: id.clone(),
                        creator: creator.clone(),
                        participants: members.iter().cloned().collect(),
                    },
                )
                .map_err(|e| ProtocolError::new(ErrorCode::Internal, e.to_string()))?,
            ),
            None => None,
        };
        {
            // Members start with an empty cursor on a fresh thread.
            let inboxes = self.inboxes.read();
            for m in &members {
                if let Some(inbox) = inboxes.get(m) {
                    set_cursor(&self.audit, &mut inbox.state.lock(), &id, 0);
                }
            }
        }
        threads.insert(
            id.clone(),
            Arc::new(Mutex::new(ThreadRecord {
                id: id.clone(),
                creator: creator.clone(),
                participants: members.clone(),
                status: ThreadStatus::Open,
                summary: None,
                messages: Vec::new(),
                log,
            })),
        );
        tracing::info!(thread = %id, creator = %creator, participants = members.len(), "thread created");
        Ok(id)
    }

    pub fn add_participant(
        &self,
        thread: &ThreadId,
        caller: &AgentId,
        agent: &AgentId,
    ) -> ProtocolResult<()> {
        let rec = self.thread(thread)?;
        let mut rec = rec.lock();
        rec.ensure_open()?;
        rec.ensure_participant(caller)?;
        self.ensure_registered(agent)?;
        if rec.participants.contains(agent) {
            return Ok(());
        }
        let ts_ms = self.clock.now_ms();
        rec.persist(&persist::encode_event(&ThreadEvent::ParticipantAdded {
            agent: agent.clone(),
            by: caller.clone(),
            ts_ms,
        }))?;
        rec.participants.insert(agent.clone());
        let max_seq = rec.messages.len() as u64;
        let inbox = self.inbox(agent)?;
        let mut st = inbox.state.lock();
        st.pending.retain(|(t, _), _| t != thread);
        set_cursor(&self.audit, &mut st, thread, max_seq);
        tracing::info!(thread = %thread, agent = %agent, by = %caller, "participant added");
        Ok(())
    }

    pub fn remove_participant(
        &self,
        thread: &ThreadId,
        caller: &AgentId,
        agent: &AgentId,
    ) -> ProtocolResult<()> {
        let rec = self.thread(thread)?;
        let mut rec = rec.lock();
        rec.ensure_open()?;
        rec.ensure_participant(caller)?;
        if !rec.participants.contains(agent) {
            return Ok(());
        }
        let ts_ms = self.clock.now_ms();
        rec.persist(&persist::encode_event(&ThreadEvent::ParticipantRemoved {
            agent: agent.clone(),
            by: caller.clone(),
            ts_ms,
        }))?;
        rec.participants.remove(agent);
        if let Ok(inbox) = self.inbox(agent) {
            let mut st = inbox.state.lock();
            st.pending.retain(|(t, _), _| t != thread);
            let max_seq = rec.messages.len() as u64;
            set_cursor(&self.audit, &mut st, thread, max_seq);
        }
        tracing::info!(thread = %thread, agent = %agent, by = %caller, "participant removed");
        if rec.participants.is_empty() {
            self.close_locked(&mut rec, caller, AUTO_CLOSE_SUMMARY)?;
        }
        Ok(())
    }

    pub fn send_message(
        &self,
        thread: &ThreadId,
        sender: &AgentId,
        kind: MessageKind,
        body: &str,
        explicit_mentions: &[AgentId],
    ) -> ProtocolResult<Message> {
        validate_body(kind, body)?;
        let mentions = {
            let registry = self.registry.read();
            for m in explicit_mentions {
                if !registry.ids.contains(m) {
                    return Err(unknown_agent(m));
                }
            }
            parse_mentions(body, explicit_mentions, &registry.ids)
        };
        let mentions: Vec<AgentId> = mentions.into_iter().filter(|m| m != sender).collect();

        let rec = self.thread(thread)?;
        let mut rec = rec.lock();
        rec.ensure_open()?;
        rec.ensure_participant(sender)?;
        if let Some(outsider) = mentions.iter().find(|m| !rec.participants.contains(*m)) {
            return Err(ProtocolError::new(
                ErrorCode::MentionNotParticipant,
                format!("mentioned agent {outsider} is not a participant of thread {thread}"),
            ));
        }
        let message = Message {
            seq: rec.next_seq(),
            thread: thread.clone(),
            sender: sender.clone(),
            kind,
            body: body.to_owned(),
            mentions,
            ts_ms: self.clock.now_ms(),
        };
        self.append_locked(&mut rec, message)
    }

    fn append_locked(&self, rec: &mut ThreadRecord, message: Message) -> ProtocolResult<Message> {
        let line = crate::model::encode_message(&message)?;
        rec.persist(&line)?;
        let stored = Arc::new(message);
        rec.messages.push(stored.clone());
        let inboxes = self.inboxes.read();
        for agent in &stored.mentions {
            if let Some(inbox) = inboxes.get(agent) {
                let mut st = inbox.state.lock();
                st.pending
                    .insert((stored.thread.clone(), stored.seq), stored.clone());
                inbox.ready.notify_all();
            }
        }
        Ok((*stored).clone())
    }

    /// Blocks until at least one undelivered mention (matching the filter)
    /// exists or the timeout elapses, then returns every matching pending
    /// mention in (thread, seq) order and advances the cursors past them.
    pub fn wait_for_mentions(
        &self,
        agent: &AgentId,
        thread_filter: Option<&ThreadId>,
        timeout_ms: Option<u64>,
    ) -> ProtocolResult<Vec<Message>> {
        let inbox = self.inbox(agent)?;
        if let Some(t) = thread_filter {
            self.thread(t)?;
        }
        let timeout = timeout_ms
            .unwrap_or(self.config.wait_timeout_default_ms)
            .min(self.config.wait_timeout_max_ms);
        let deadline = self.clock.now_ms().saturating_add(timeout);
        let wall_deadline = self.clock.wall_instant(deadline);

        let mut st = inbox.state.lock();
        loop {
            let keys: Vec<(ThreadId, u64)> = st
                .pending
                .keys()
                .filter(|(t, _)| thread_filter.is_none_or(|f| f == t))
                .cloned()
                .collect();
            if !keys.is_empty() {
                let mut out = Vec::with_capacity(keys.len());
                for key in keys {
                    let m = st.pending.remove(&key).expect("key present");
                    set_cursor(&self.audit, &mut st, &key.0, key.1);
                    out.push((*m).clone());
                }
                return Ok(out);
            }
            if self.clock.now_ms() >= deadline {
                return Ok(Vec::new());
            }
            match wall_deadline {
                Some(at) => {
                    if inbox.ready.wait_until(&mut st, at).timed_out() {
                        // Loop once more: a mention may have raced the timeout.
                        if st
                            .pending
                            .keys()
                            .all(|(t, _)| thread_filter.is_some_and(|f| f != t))
                        {
                            return Ok(Vec::new());
                        }
                    }
                }
                None => inbox.ready.wait(&mut st),
            }
        }
    }

    pub fn close_thread(
        &self,
        thread: &ThreadId,
        caller: &AgentId,
        summary: &str,
    ) -> ProtocolResult<()> {
        let rec = self.thread(thread)?;
        let mut rec = rec.lock();
        rec.ensure_open()?;
        rec.ensure_participant(caller)?;
        self.close_locked(&mut rec, caller, summary)
    }

    fn close_locked(
        &self,
        rec: &mut ThreadRecord,
        caller: &AgentId,
        summary: &str,
    ) -> ProtocolResult<()> {
        let body = format!("closed: {summary}");
        validate_body(MessageKind::System, &body)?;
        let message = Message {
            seq: rec.next_seq(),
            thread: rec.id.clone(),
            sender: caller.clone(),
            kind: MessageKind::System,
            body,
            mentions: Vec::new(),
            ts_ms: self.clock.now_ms(),
        };
        self.append_locked(rec, message)?;
        let ts_ms = self.clock.now_ms();
        rec.persist(&persist::encode_event(&ThreadEvent::Closed {
            summary: summary.to_owned(),
            by: caller.clone(),
            ts_ms,
        }))?;
        if let Some(log) = &rec.log {
            log.sync()
                .map_err(|e| ProtocolError::new(ErrorCode::Internal, e.to_string()))?;
        }
        rec.status = ThreadStatus::Closed;
        rec.summary = Some(summary.to_owned());
        tracing::info!(thread = %rec.id, by = %caller, summary, "thread closed");
        Ok(())
    }

    pub fn get_transcript(&self, thread: &ThreadId) -> ProtocolResult<Transcript> {
        let rec = self.thread(thread)?;
        let rec = rec.lock();
        Ok(Transcript {
            header: rec.header(),
            messages: rec.messages.iter().map(|m| (**m).clone()).collect(),
        })
    }

    pub fn thread_ids(&self) -> Vec<ThreadId> {
        self.threads.read().keys().cloned().collect()
    }

    /// Messages stored across all threads. Cheap; used by schedulers to
    /// detect quiescence.
    pub fn message_total(&self) -> u64 {
        self.threads
            .read()
            .values()
            .map(|r| r.lock().messages.len() as u64)
            .sum()
    }

    /// Highest delivered seq per thread for `agent`.
    pub fn cursor(&self, agent: &AgentId) -> ProtocolResult<BTreeMap<ThreadId, u64>> {
        Ok(self.inbox(agent)?.state.lock().delivered.clone())
    }

    /// Number of mentions waiting for `agent`.
    pub fn pending_count(&self, agent: &AgentId) -> ProtocolResult<usize> {
        Ok(self.inbox(agent)?.state.lock().pending.len())
    }

    /// Flushes every open thread log to stable storage.
    pub fn sync(&self) -> Result<(), PersistError> {
        for rec in self.threads.read().values() {
            if let Some(log) = &rec.lock().log {
                log.sync()?;
            }
        }
        Ok(())
    }
}

fn unknown_agent(agent: &AgentId) -> ProtocolError {
    ProtocolError::new(ErrorCode::UnknownAgent, agent.as_str().to_owned())
}
