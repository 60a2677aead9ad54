use std::sync::Arc;

use crate::error::ProtocolResult;
use crate::model::{AgentId, AgentRegistration, Message, MessageKind, ThreadId, Transcript};
use crate::server::Server;

use super::A2aApi;

/// In-process handle acting as one agent on a shared server.
#[derive(Clone)]
pub struct LocalSession {
    server: Arc<Server>,
    agent: AgentId,
}

impl LocalSession {
    pub fn new(server: Arc<Server>, agent: AgentId) -> Self {
        Self { server, agent }
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }
}

impl A2aApi for LocalSession {
    fn agent(&self) -> &AgentId {
        &self.agent
    }

    fn list_agents(&self) -> ProtocolResult<Vec<AgentRegistration>> {
        Ok(self.server.list_agents())
    }

    fn create_thread(&self, participants: &[AgentId]) -> ProtocolResult<ThreadId> {
        self.server.create_thread(&self.agent, participants)
    }

    fn add_participant(&self, thread: &ThreadId, agent: &AgentId) -> ProtocolResult<()> {
        self.server.add_participant(thread, &self.agent, agent)
    }

    fn remove_participant(&self, thread: &ThreadId, agent: &AgentId) -> ProtocolResult<()> {
        self.server.remove_participant(thread, &self.agent, agent)
    }

    fn send_message(
        &self,
        thread: &ThreadId,
        kind: MessageKind,
        body: &str,
        mentions: &[AgentId],
    ) -> ProtocolResult<Message> {
        self.server
            .send_message(thread, &self.agent, kind, body, mentions)
    }

    fn wait_for_mentions(
        &self,
        thread: Option<&ThreadId>,
        timeout_ms: Option<u64>,
    ) -> ProtocolResult<Vec<Message>> {
        self.server
            .wait_for_mentions(&self.agent, thread, timeout_ms)
    }

    fn close_thread(&self, thread: &ThreadId, summary: &str) -> ProtocolResult<()> {
        self.server.close_thread(thread, &self.agent, summary)
    }

    fn get_transcript(&self, thread: &ThreadId) -> ProtocolResult<Transcript> {
        self.server.get_transcript(thread)
    }
}
