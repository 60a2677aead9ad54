//! Agent-side access to the coordination server.
//!
//! [`A2aApi`] is the seven primitives plus transcript reads, bound to one
//! calling agent. [`Session`] speaks the TCP wire protocol;
//! [`LocalSession`] calls an in-process [`Server`](crate::server::Server)
//! directly and is what the deterministic harness uses.

mod local;
mod mention_loop;
mod session;

use serde_json::{json, Value};

use crate::error::ProtocolResult;
use crate::model::{AgentId, AgentRegistration, Message, MessageKind, ThreadId, Transcript};

pub use local::LocalSession;
pub use mention_loop::{LoopHandle, LoopStats, MentionLoop, Outbound};
pub use session::{Session, SessionState};

pub trait A2aApi: Send + Sync {
    /// The agent this handle acts as.
    fn agent(&self) -> &AgentId;

    fn list_agents(&self) -> ProtocolResult<Vec<AgentRegistration>>;

    fn create_thread(&self, participants: &[AgentId]) -> ProtocolResult<ThreadId>;

    fn add_participant(&self, thread: &ThreadId, agent: &AgentId) -> ProtocolResult<()>;

    fn remove_participant(&self, thread: &ThreadId, agent: &AgentId) -> ProtocolResult<()>;

    fn send_message(
        &self,
        thread: &ThreadId,
        kind: MessageKind,
        body: &str,
        mentions: &[AgentId],
    ) -> ProtocolResult<Message>;

    /// `timeout_ms = None` uses the server default.
    fn wait_for_mentions(
        &self,
        thread: Option<&ThreadId>,
        timeout_ms: Option<u64>,
    ) -> ProtocolResult<Vec<Message>>;

    fn close_thread(&self, thread: &ThreadId, summary: &str) -> ProtocolResult<()>;

    fn get_transcript(&self, thread: &ThreadId) -> ProtocolResult<Transcript>;
}

/// Wire parameters for each primitive, shared by [`Session`] and tests.
pub(crate) mod params {
    use super::*;

    pub fn create_thread(participants: &[AgentId]) -> Value {
        json!({ "participants": participants })
    }

    pub fn membership(thread: &ThreadId, agent: &AgentId) -> Value {
        json!({ "thread": thread, "agent": agent })
    }

    pub fn send(thread: &ThreadId, kind: MessageKind, body: &str, mentions: &[AgentId]) -> Value {
        json!({ "thread": thread, "kind": kind, "body": body, "mentions": mentions })
    }

    pub fn wait(thread: Option<&ThreadId>, timeout_ms: Option<u64>) -> Value {
        let mut v = json!({});
        if let Some(t) = thread {
            v["thread"] = json!(t);
        }
        if let Some(ms) = timeout_ms {
            v["timeout_ms"] = json!(ms);
        }
        v
    }

    pub fn close(thread: &ThreadId, summary: &str) -> Value {
        json!({ "thread": thread, "summary": summary })
    }

    pub fn thread(thread: &ThreadId) -> Value {
        json!({ "thread": thread })
    }
}
