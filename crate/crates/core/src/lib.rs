//! Thread-based agent-to-agent coordination.
//!
//! * [`model`]: identifiers, messages, mention parsing, canonical encoding.
//! * [`server`]: registry, threads, mention delivery, wire protocol, TCP.
//! * [`client`]: the agent-side API over TCP or in-process.
//! * [`orchestration`]: planner / worker / critique / answer-finding roles
//!   and consensus voting.
//! * [`harness`]: scripted scenarios run under a logical clock.

pub mod client;
pub mod error;
pub mod harness;
pub mod model;
pub mod orchestration;
pub mod server;

pub use error::{ErrorCode, ProtocolError, ProtocolResult};
