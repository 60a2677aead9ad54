//! Newline-delimited JSON frames and the server-side request dispatcher.
//!
//! Request: `{"id":<u64>,"op":"<primitive>","params":{…}}`
//! Response: `{"id":…,"ok":true,"result":…}` or
//! `{"id":…,"ok":false,"error":{"code":"<CODE>","message":"…"}}`.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ErrorCode, ProtocolError, ProtocolResult};
use crate::model::{validate_agent_id, AgentId, AgentRegistration, MessageKind, Role, ThreadId};

use super::Server;

pub const OP_HELLO: &str = "hello";

/// Every operation a session may issue after `hello`.
pub const OPS: [&str; 9] = [
    "list_agents",
    "create_thread",
    "add_participant",
    "remove_participant",
    "send_message",
    "wait_for_mentions",
    "close_thread",
    "get_transcript",
    "register_agent",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestFrame {
    #[serde(default)]
    pub id: u64,
    pub op: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseFrame {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ProtocolError>,
}

impl ResponseFrame {
    pub fn ok(id: u64, result: Value) -> Self {
        Self {
            id,
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn err(id: u64, error: ProtocolError) -> Self {
        Self {
            id,
            ok: false,
            result: None,
            error: Some(error),
        }
    }

    pub fn into_result(self) -> ProtocolResult<Value> {
        if self.ok {
            Ok(self.result.unwrap_or(Value::Null))
        } else {
            Err(self
                .error
                .unwrap_or_else(|| ProtocolError::bad_request("error frame without error")))
        }
    }
}

pub fn encode_frame<T: Serialize>(frame: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(frame).expect("frame serializes");
    out.push(b'\n');
    out
}

pub fn parse_params<T: DeserializeOwned>(params: Value) -> ProtocolResult<T> {
    let params = if params.is_null() { json!({}) } else { params };
    serde_json::from_value(params)
        .map_err(|e| ProtocolError::bad_request(format!("malformed params: {e}")))
}

fn agent(raw: &str) -> ProtocolResult<AgentId> {
    validate_agent_id(raw)
}

fn thread(raw: &str) -> ProtocolResult<ThreadId> {
    ThreadId::parse(raw)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelloParams {
    pub agent: String,
    #[serde(default)]
    pub register: Option<RegisterInfo>,
    /// Read-only session that neither needs nor creates a registration.
    #[serde(default)]
    pub observe: bool,
}

/// Operations an observer session may issue.
pub const OBSERVER_OPS: [&str; 2] = ["list_agents", "get_transcript"];

/// The accepted handshake.
#[derive(Debug, Clone)]
pub struct Hello {
    pub agent: AgentId,
    pub observer: bool,
    pub result: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterInfo {
    pub description: String,
    pub role: Role,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateThreadParams {
    #[serde(default)]
    participants: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MembershipParams {
    thread: String,
    agent: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SendParams {
    thread: String,
    kind: MessageKind,
    body: String,
    #[serde(default)]
    mentions: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WaitParams {
    #[serde(default)]
    thread: Option<String>,
    #[serde(default)]
    timeout_ms: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CloseParams {
    thread: String,
    #[serde(default)]
    summary: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ThreadParams {
    thread: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterParams {
    id: String,
    description: String,
    role: Role,
}

fn ack() -> Value {
    json!({ "ack": true })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("result serializes")
}

/// Handles a `hello`: resolves the session identity, registering the agent
/// when asked to (or when auto-registration is enabled).
pub fn handle_hello(server: &Server, params: Value) -> ProtocolResult<Hello> {
    let p: HelloParams = parse_params(params)?;
    let id = agent(&p.agent)?;
    if p.observe {
        if p.register.is_some() {
            return Err(ProtocolError::bad_request("an observer cannot register"));
        }
        return Ok(Hello {
            result: json!({ "agent": id, "registered": false, "observer": true }),
            agent: id,
            observer: true,
        });
    }
    let registered = match p.register {
        Some(info) => {
            server.register_agent(AgentRegistration::new(
                id.clone(),
                info.description,
                info.role,
            ))?;
            true
        }
        None if server.is_registered(&id) => false,
        None if server.config().auto_register => {
            server.register_agent(AgentRegistration::new(
                id.clone(),
                format!("agent {id} (auto-registered)"),
                Role::Worker,
            ))?;
            true
        }
        None => {
            return Err(ProtocolError::new(
                ErrorCode::HelloRejected,
                format!("agent {id} is not registered and auto-registration is disabled"),
            ))
        }
    };
    Ok(Hello {
        result: json!({ "agent": id, "registered": registered }),
        agent: id,
        observer: false,
    })
}

/// Executes one primitive on behalf of `caller`.
pub fn dispatch(
    server: &Server,
    caller: &AgentId,
    op: &str,
    params: Value,
) -> ProtocolResult<Value> {
    match op {
        "list_agents" => {
            let _: Empty = parse_params(params)?;
            Ok(to_value(&server.list_agents()))
        }
        "create_thread" => {
            let p: CreateThreadParams = parse_params(params)?;
            let members = p
                .participants
                .iter()
                .map(|s| agent(s))
                .collect::<ProtocolResult<Vec<_>>>()?;
            let id = server.create_thread(caller, &members)?;
            Ok(json!({ "thread": id }))
        }
        "add_participant" => {
            let p: MembershipParams = parse_params(params)?;
            server.add_participant(&thread(&p.thread)?, caller, &agent(&p.agent)?)?;
            Ok(ack())
        }
        "remove_participant" => {
            let p: MembershipParams = parse_params(params)?;
            server.remove_participant(&thread(&p.thread)?, caller, &agent(&p.agent)?)?;
            Ok(ack())
        }
        "send_message" => {
            let p: SendParams = parse_params(params)?;
            let mentions = p
                .mentions
                .iter()
                .map(|s| agent(s))
                .collect::<ProtocolResult<Vec<_>>>()?;
            let m = server.send_message(&thread(&p.thread)?, caller, p.kind, &p.body, &mentions)?;
            Ok(to_value(&m))
        }
        "wait_for_mentions" => {
            let p: WaitParams = parse_params(params)?;
            let filter = p.thread.as_deref().map(thread).transpose()?;
            let got = server.wait_for_mentions(caller, filter.as_ref(), p.timeout_ms)?;
            Ok(to_value(&got))
        }
        "close_thread" => {
            let p: CloseParams = parse_params(params)?;
            server.close_thread(&thread(&p.thread)?, caller, &p.summary)?;
            Ok(ack())
        }
        "get_transcript" => {
            let p: ThreadParams = parse_params(params)?;
            Ok(to_value(&server.get_transcript(&thread(&p.thread)?)?))
        }
        "register_agent" => {
            let p: RegisterParams = parse_params(params)?;
            let id = server.register_agent(AgentRegistration::new(
                agent(&p.id)?,
                p.description,
                p.role,
            ))?;
            Ok(json!({ "agent": id }))
        }
        OP_HELLO => Err(ProtocolError::bad_request("session already said hello")),
        other => Err(ProtocolError::bad_request(format!("unknown op {other:?}"))),
    }
}
