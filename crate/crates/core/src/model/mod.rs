//! Domain types shared by the server, the client SDK, orchestration and
//! persistence.

mod codec;
mod mentions;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ErrorCode, ProtocolError, ProtocolResult};

pub use codec::{decode_message, encode_message, encode_transcript};
pub use mentions::parse_mentions;

/// Largest accepted message body, in bytes.
pub const MAX_BODY_BYTES: usize = 65536;
/// Largest accepted agent description, in characters.
pub const MAX_DESCRIPTION_CHARS: usize = 2048;
/// Longest accepted agent identifier.
pub const MAX_AGENT_ID_LEN: usize = 64;

/// Agent identifier: `[a-z][a-z0-9_-]{0,63}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct AgentId(String);

pub(crate) fn is_id_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-'
}

impl AgentId {
    pub fn new(raw: &str) -> ProtocolResult<Self> {
        validate_agent_id(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Checks the identifier grammar, reporting the offending character position.
pub fn validate_agent_id(raw: &str) -> ProtocolResult<AgentId> {
    if raw.is_empty() {
        return Err(ProtocolError::new(
            ErrorCode::BadAgentId,
            "agent id is empty (position 0)",
        ));
    }
    for (pos, c) in raw.chars().enumerate() {
        if pos == MAX_AGENT_ID_LEN {
            return Err(ProtocolError::new(
                ErrorCode::BadAgentId,
                format!("agent id longer than {MAX_AGENT_ID_LEN} characters (position {pos})"),
            ));
        }
        let ok = if pos == 0 {
            c.is_ascii_lowercase()
        } else {
            is_id_char(c)
        };
        if !ok {
            let why = if pos == 0 {
                "must start with a lowercase letter"
            } else {
                "allowed characters are a-z, 0-9, '_' and '-'"
            };
            return Err(ProtocolError::new(
                ErrorCode::BadAgentId,
                format!("invalid character {c:?} at position {pos}: {why}"),
            ));
        }
    }
    Ok(AgentId(raw.to_owned()))
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for AgentId {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        validate_agent_id(s)
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        validate_agent_id(&s).map_err(serde::de::Error::custom)
    }
}

/// Server-generated thread identifier, 32 lowercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ThreadId(String);

impl ThreadId {
    pub fn parse(raw: &str) -> ProtocolResult<Self> {
        let ok = raw.len() == 32
            && raw
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if ok {
            Ok(ThreadId(raw.to_owned()))
        } else {
            Err(ProtocolError::bad_request(format!(
                "thread id must be 32 lowercase hex characters, got {raw:?}"
            )))
        }
    }

    pub(crate) fn from_bytes(bytes: [u8; 16]) -> Self {
        ThreadId(hex::encode(bytes))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ThreadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ThreadId {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ThreadId::parse(s)
    }
}

impl<'de> Deserialize<'de> for ThreadId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        ThreadId::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Planner,
    Worker,
    Critique,
    AnswerFinding,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Planner => "planner",
            Role::Worker => "worker",
            Role::Critique => "critique",
            Role::AnswerFinding => "answer_finding",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "planner" => Ok(Role::Planner),
            "worker" => Ok(Role::Worker),
            "critique" => Ok(Role::Critique),
            "answer_finding" => Ok(Role::AnswerFinding),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// A registered agent as returned by discovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRegistration {
    pub id: AgentId,
    pub description: String,
    pub role: Role,
}

impl AgentRegistration {
    pub fn new(id: AgentId, description: impl Into<String>, role: Role) -> Self {
        Self {
            id,
            description: description.into(),
            role,
        }
    }

    pub fn validate(&self) -> ProtocolResult<()> {
        if self.description.is_empty() {
            return Err(ProtocolError::bad_request(
                "agent description must be nonempty",
            ));
        }
        if self.description.chars().count() > MAX_DESCRIPTION_CHARS {
            return Err(ProtocolError::bad_request(format!(
                "agent description exceeds {MAX_DESCRIPTION_CHARS} characters"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Chat,
    Plan,
    Result,
    Critique,
    Suggestion,
    Progress,
    Candidate,
    Vote,
    Submission,
    System,
}

impl MessageKind {
    pub const ALL: [MessageKind; 10] = [
        MessageKind::Chat,
        MessageKind::Plan,
        MessageKind::Result,
        MessageKind::Critique,
        MessageKind::Suggestion,
        MessageKind::Progress,
        MessageKind::Candidate,
        MessageKind::Vote,
        MessageKind::Submission,
        MessageKind::System,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Chat => "chat",
            MessageKind::Plan => "plan",
            MessageKind::Result => "result",
            MessageKind::Critique => "critique",
            MessageKind::Suggestion => "suggestion",
            MessageKind::Progress => "progress",
            MessageKind::Candidate => "candidate",
            MessageKind::Vote => "vote",
            MessageKind::Submission => "submission",
            MessageKind::System => "system",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown message kind {s:?}"))
    }
}

/// Checks the kind-specific body rules (`vote`, `critique`) and the size cap.
pub fn validate_body(kind: MessageKind, body: &str) -> ProtocolResult<()> {
    if body.len() > MAX_BODY_BYTES {
        return Err(ProtocolError::new(
            ErrorCode::BodyTooLarge,
            format!("body is {} bytes, limit is {MAX_BODY_BYTES}", body.len()),
        ));
    }
    match kind {
        MessageKind::Vote if body != "approve" && body != "reject" => Err(
            ProtocolError::bad_request("vote body must be exactly `approve` or `reject`"),
        ),
        MessageKind::Critique
            if !body.starts_with("accept:") && !body.starts_with("uncertain:") =>
        {
            Err(ProtocolError::bad_request(
                "critique body must start with `accept:` or `uncertain:`",
            ))
        }
        _ => Ok(()),
    }
}

/// One stored utterance in a thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    pub seq: u64,
    pub thread: ThreadId,
    pub sender: AgentId,
    pub kind: MessageKind,
    pub body: String,
    pub mentions: Vec<AgentId>,
    pub ts_ms: u64,
}

impl Message {
    /// Checks every structural invariant of a stored message.
    pub fn validate(&self) -> ProtocolResult<()> {
        if self.seq == 0 {
            return Err(ProtocolError::bad_request("seq must be >= 1"));
        }
        validate_body(self.kind, &self.body)?;
        let mut seen = BTreeSet::new();
        for m in &self.mentions {
            if m == &self.sender {
                return Err(ProtocolError::bad_request("mentions contain the sender"));
            }
            if !seen.insert(m) {
                return Err(ProtocolError::bad_request(format!("duplicate mention {m}")));
            }
        }
        Ok(())
    }

    pub fn mentions(&self, agent: &AgentId) -> bool {
        self.mentions.contains(agent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadStatus {
    Open,
    Closed,
}

/// Thread header as exposed by `get_transcript`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadHeader {
    pub thread: ThreadId,
    pub creator: AgentId,
    pub participants: Vec<AgentId>,
    pub status: ThreadStatus,
    pub summary: Option<String>,
}

/// A thread's header and full ordered log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    #[serde(flatten)]
    pub header: ThreadHeader,
    pub messages: Vec<Message>,
}

impl Transcript {
    /// True when the seq values are exactly `1..=len`.
    pub fn is_gap_free(&self) -> bool {
        self.messages
            .iter()
            .enumerate()
            .all(|(i, m)| m.seq == i as u64 + 1)
    }

    pub fn is_closed(&self) -> bool {
        self.header.status == ThreadStatus::Closed
    }
}
