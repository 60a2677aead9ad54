use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Error codes carried verbatim on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorCode {
    BadAgentId,
    DuplicateAgentId,
    UnknownAgent,
    UnknownThread,
    ThreadClosed,
    NotParticipant,
    MentionNotParticipant,
    BodyTooLarge,
    EncodingError,
    BadRequest,
    HelloRejected,
    ConnectFailed,
    ConnectionLost,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 14] = [
        ErrorCode::BadAgentId,
        ErrorCode::DuplicateAgentId,
        ErrorCode::UnknownAgent,
        ErrorCode::UnknownThread,
        ErrorCode::ThreadClosed,
        ErrorCode::NotParticipant,
        ErrorCode::MentionNotParticipant,
        ErrorCode::BodyTooLarge,
        ErrorCode::EncodingError,
        ErrorCode::BadRequest,
        ErrorCode::HelloRejected,
        ErrorCode::ConnectFailed,
        ErrorCode::ConnectionLost,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadAgentId => "BAD_AGENT_ID",
            ErrorCode::DuplicateAgentId => "DUPLICATE_AGENT_ID",
            ErrorCode::UnknownAgent => "UNKNOWN_AGENT",
            ErrorCode::UnknownThread => "UNKNOWN_THREAD",
            ErrorCode::ThreadClosed => "THREAD_CLOSED",
            ErrorCode::NotParticipant => "NOT_PARTICIPANT",
            ErrorCode::MentionNotParticipant => "MENTION_NOT_PARTICIPANT",
            ErrorCode::BodyTooLarge => "BODY_TOO_LARGE",
            ErrorCode::EncodingError => "ENCODING_ERROR",
            ErrorCode::BadRequest => "BAD_REQUEST",
            ErrorCode::HelloRejected => "HELLO_REJECTED",
            ErrorCode::ConnectFailed => "CONNECT_FAILED",
            ErrorCode::ConnectionLost => "CONNECTION_LOST",
            ErrorCode::Internal => "INTERNAL_ERROR",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorCode::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown error code {s:?}"))
    }
}

impl Serialize for ErrorCode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ErrorCode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A protocol-level failure: a stable code plus human-readable text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub message: String,
}

impl ProtocolError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }
}

pub type ProtocolResult<T> = Result<T, ProtocolError>;
