//! Semi-centralized coordination over the A2A primitives.
//!
//! A planner seeds and revises a [`Plan`], workers execute allocated steps,
//! a critique agent judges every result, and an answer-finding agent
//! compiles a candidate that all other participants vote on before it is
//! submitted. Every role is a message-driven state machine implementing
//! [`RoleAgent`]; cross-role state only travels through thread messages.
//!
//! What a role *decides* (plans, results, verdicts, votes, free-form
//! contributions) is delegated to a [`Reasoner`], so the same machinery
//! runs scripted agents in tests and externally backed agents in
//! production.

pub mod audit;
pub mod consensus;
pub mod plan;
pub mod protocol;
pub mod reasoner;
mod roles;
mod run;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ErrorCode, ProtocolError};
use crate::model::{AgentId, AgentRegistration, Role};

pub use consensus::{
    collect_votes, decide_consensus, ConsensusDecision, ConsensusMode, ConsensusOutcome,
    ConsensusPolicy, Fraction, Vote,
};
pub use plan::{Plan, PlanDraft, Step};
pub use reasoner::{
    CompileContext, Compiled, ContributeContext, Contribution, DefaultReasoner, Delay, ExecOutcome,
    GiveUpContext, Reasoner, RevisionContext, RevisionTrigger, StepContext, Timed, Verdict,
    VoteContext,
};
pub use roles::{build_role, AnswerFinder, CritiqueAgent, Planner, RoleAgent, RoleContext, Worker};
pub use run::{
    discover, propose_candidate, run_task, submit, CritiqueRecord, LiveOptions, RunLimits,
    RunOutcome, SubtaskResult, TaskRun,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrchErrorCode {
    NoWorkers,
    AmbiguousRole,
    MissingRole,
    PlannerFailed,
    MaxRoundsExceeded,
    NoValidatedResults,
    SubmitWithoutConsensus,
    /// The server refused a message the step depended on.
    Rejected,
    Aborted,
}

impl OrchErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            OrchErrorCode::NoWorkers => "NO_WORKERS",
            OrchErrorCode::AmbiguousRole => "AMBIGUOUS_ROLE",
            OrchErrorCode::MissingRole => "MISSING_ROLE",
            OrchErrorCode::PlannerFailed => "PLANNER_FAILED",
            OrchErrorCode::MaxRoundsExceeded => "MAX_ROUNDS_EXCEEDED",
            OrchErrorCode::NoValidatedResults => "NO_VALIDATED_RESULTS",
            OrchErrorCode::SubmitWithoutConsensus => "SUBMIT_WITHOUT_CONSENSUS",
            OrchErrorCode::Rejected => "REJECTED",
            OrchErrorCode::Aborted => "ABORTED",
        }
    }
}

impl fmt::Display for OrchErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct OrchError {
    pub code: OrchErrorCode,
    pub message: String,
}

impl OrchError {
    pub fn new(code: OrchErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn aborted(message: impl Into<String>) -> Self {
        Self::new(OrchErrorCode::Aborted, message)
    }
}

impl From<ProtocolError> for OrchError {
    fn from(e: ProtocolError) -> Self {
        OrchError::aborted(e.to_string())
    }
}

/// Transport failures end a run; every other protocol error is a local
/// rejection the role can survive.
pub(crate) fn is_transport_failure(e: &ProtocolError) -> bool {
    matches!(
        e.code,
        ErrorCode::ConnectionLost | ErrorCode::ConnectFailed | ErrorCode::Internal
    )
}

/// Who plays which part in a run: p, c, f and the worker set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub planner: AgentId,
    pub critique: AgentId,
    pub answer_finding: AgentId,
    pub workers: BTreeSet<AgentId>,
}

impl RoleAssignment {
    /// Resolves roles from a registry snapshot. Each of planner, critique
    /// and answer-finding must be registered exactly once.
    pub fn from_registry(agents: &[AgentRegistration]) -> Result<Self, OrchError> {
        let pick = |role: Role| -> Result<AgentId, OrchError> {
            let found: Vec<&AgentId> = agents
                .iter()
                .filter(|a| a.role == role)
                .map(|a| &a.id)
                .collect();
            match found.as_slice() {
                [one] => Ok((*one).clone()),
                [] => Err(OrchError::new(
                    OrchErrorCode::MissingRole,
                    format!("no agent registered as {role}"),
                )),
                many => Err(OrchError::new(
                    OrchErrorCode::AmbiguousRole,
                    format!(
                        "{} agents registered as {role}: {}",
                        many.len(),
                        many.iter()
                            .map(|a| a.as_str())
                            .collect::<Vec<_>>()
                            .join(", ")
                    ),
                )),
            }
        };
        let workers: BTreeSet<AgentId> = agents
            .iter()
            .filter(|a| a.role == Role::Worker)
            .map(|a| a.id.clone())
            .collect();
        if workers.is_empty() {
            return Err(OrchError::new(
                OrchErrorCode::NoWorkers,
                "no agent registered as worker",
            ));
        }
        Ok(RoleAssignment {
            planner: pick(Role::Planner)?,
            critique: pick(Role::Critique)?,
            answer_finding: pick(Role::AnswerFinding)?,
            workers,
        })
    }

    pub fn role_of(&self, agent: &AgentId) -> Option<Role> {
        if agent == &self.planner {
            Some(Role::Planner)
        } else if agent == &self.critique {
            Some(Role::Critique)
        } else if agent == &self.answer_finding {
            Some(Role::AnswerFinding)
        } else if self.workers.contains(agent) {
            Some(Role::Worker)
        } else {
            None
        }
    }

    /// Every role-holder, sorted.
    pub fn all(&self) -> BTreeSet<AgentId> {
        let mut s = self.workers.clone();
        s.insert(self.planner.clone());
        s.insert(self.critique.clone());
        s.insert(self.answer_finding.clone());
        s
    }
}
