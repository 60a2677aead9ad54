//! Role state machines. Each role is driven by `activate` calls carrying
//! the mentions delivered since the previous call and the current time.

mod answer;
mod critique;
mod planner;
mod worker;

use std::collections::BTreeMap;

use crate::client::A2aApi;
use crate::model::{AgentId, Message, MessageKind, ThreadId};

use super::consensus::Vote;
use super::protocol::{self, VerdictKind};
use super::reasoner::{ContributeContext, Reasoner, VoteContext};
use super::run::RunLimits;
use super::{is_transport_failure, OrchError, RoleAssignment};

pub use answer::AnswerFinder;
pub use critique::CritiqueAgent;
pub use planner::Planner;
pub use worker::Worker;

/// Free-form messages one agent may post per plan version.
pub const MAX_CONTRIBUTIONS_PER_VERSION: usize = 2;

pub trait RoleAgent: Send {
    fn id(&self) -> &AgentId;

    /// Handles `delivered` mentions and any timers due at `now`.
    fn activate(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        delivered: &[Message],
    ) -> Result<(), OrchError>;

    /// Earliest time a timer of this role fires, if any.
    fn next_deadline(&self) -> Option<u64>;

    /// Whether the role reads the thread on every activation rather than
    /// only reacting to mentions.
    fn observes(&self) -> bool {
        false
    }

    fn is_done(&self) -> bool {
        false
    }

    fn as_planner(&self) -> Option<&Planner> {
        None
    }
}

/// Configuration every role of one run shares.
#[derive(Debug, Clone)]
pub struct RoleContext {
    pub roles: RoleAssignment,
    pub limits: RunLimits,
    pub task: String,
}

/// Builds the state machine for `agent`'s role. `None` when the agent
/// holds no role.
pub fn build_role(
    agent: &AgentId,
    ctx: RoleContext,
    reasoner: Box<dyn Reasoner>,
) -> Option<Box<dyn RoleAgent>> {
    use crate::model::Role;
    Some(match ctx.roles.role_of(agent)? {
        Role::Planner => Box::new(Planner::new(ctx, reasoner)),
        Role::Critique => Box::new(CritiqueAgent::new(agent.clone(), ctx, reasoner)),
        Role::AnswerFinding => Box::new(AnswerFinder::new(agent.clone(), ctx, reasoner)),
        Role::Worker => Box::new(Worker::new(agent.clone(), ctx, reasoner)),
    })
}

/// Sends, surviving local rejections. Transport failures abort.
pub(crate) fn post(
    api: &dyn A2aApi,
    thread: &ThreadId,
    kind: MessageKind,
    body: &str,
    mentions: &[AgentId],
) -> Result<Option<Message>, OrchError> {
    match api.send_message(thread, kind, body, mentions) {
        Ok(m) => Ok(Some(m)),
        Err(e) if is_transport_failure(&e) => Err(e.into()),
        Err(e) => {
            tracing::debug!(agent = %api.agent(), %kind, error = %e, "message rejected");
            Ok(None)
        }
    }
}

pub(crate) fn transcript(
    api: &dyn A2aApi,
    thread: &ThreadId,
) -> Result<crate::model::Transcript, OrchError> {
    api.get_transcript(thread).map_err(OrchError::from)
}

/// Results that received an `accept` verdict from `critique`, in verdict
/// order. A result counts once.
pub fn accepted_results(messages: &[Message], critique: &AgentId) -> Vec<Message> {
    let by_seq: BTreeMap<u64, &Message> = messages
        .iter()
        .filter(|m| m.kind == MessageKind::Result)
        .map(|m| (m.seq, m))
        .collect();
    let mut out: Vec<Message> = Vec::new();
    for m in messages
        .iter()
        .filter(|m| m.kind == MessageKind::Critique && &m.sender == critique)
    {
        let Some(v) = protocol::parse_verdict(&m.body) else {
            continue;
        };
        if v.kind != VerdictKind::Accept {
            continue;
        }
        if let Some(r) = v.result_seq.and_then(|s| by_seq.get(&s)) {
            if r.seq < m.seq && !out.iter().any(|o| o.seq == r.seq) {
                out.push((*r).clone());
            }
        }
    }
    out
}

fn latest_plan_version(messages: &[Message], planner: &AgentId) -> Option<u32> {
    protocol::latest_plan(messages, planner)
        .and_then(|m| super::plan::Plan::parse(&m.body).ok())
        .map(|p| p.version)
}

#[derive(Debug, Clone)]
pub(crate) enum Action {
    Post {
        kind: MessageKind,
        body: String,
        mentions: Vec<AgentId>,
    },
    Candidate {
        answer: String,
        rationale: Option<String>,
    },
}

struct Scheduled {
    due: u64,
    order: u64,
    thread: ThreadId,
    action: Action,
}

/// Timed outgoing actions, fired in (due, insertion) order.
#[derive(Default)]
pub(crate) struct Agenda {
    items: Vec<Scheduled>,
    next_order: u64,
}

impl Agenda {
    pub fn schedule(&mut self, due: u64, thread: ThreadId, action: Action) {
        self.items.push(Scheduled {
            due,
            order: self.next_order,
            thread,
            action,
        });
        self.next_order += 1;
        self.items.sort_by_key(|s| (s.due, s.order));
    }

    pub fn next_due(&self) -> Option<u64> {
        self.items.first().map(|s| s.due)
    }

    pub fn fire(&mut self, api: &dyn A2aApi, now: u64) -> Result<(), OrchError> {
        while self.items.first().is_some_and(|s| s.due <= now) {
            let s = self.items.remove(0);
            perform(api, &s.thread, s.action)?;
        }
        Ok(())
    }
}

pub(crate) fn perform(
    api: &dyn A2aApi,
    thread: &ThreadId,
    action: Action,
) -> Result<(), OrchError> {
    match action {
        Action::Post {
            kind,
            body,
            mentions,
        } => post(api, thread, kind, &body, &mentions).map(|_| ()),
        Action::Candidate { answer, rationale } => {
            match super::run::propose_candidate(api, thread, &answer, rationale.as_deref(), 1) {
                Ok(_) => Ok(()),
                Err(e) if e.code == super::OrchErrorCode::Aborted => Err(e),
                Err(e) => {
                    tracing::debug!(error = %e, "candidate not proposed");
                    Ok(())
                }
            }
        }
    }
}

/// Vote and contribution handling shared by every non-planner role.
pub(crate) struct Responder {
    pub id: AgentId,
    pub ctx: RoleContext,
    pub agenda: Agenda,
    contributed: BTreeMap<(ThreadId, Option<u32>), usize>,
}

impl Responder {
    pub fn new(id: AgentId, ctx: RoleContext) -> Self {
        Self {
            id,
            ctx,
            agenda: Agenda::default(),
            contributed: BTreeMap::new(),
        }
    }

    /// Reacts to a mention that is not a role obligation: votes on
    /// candidates, free-form contributions otherwise.
    pub fn respond(
        &mut self,
        api: &dyn A2aApi,
        reasoner: &mut dyn Reasoner,
        now: u64,
        m: &Message,
    ) -> Result<(), OrchError> {
        let planner = self.ctx.roles.planner.clone();
        let tr = transcript(api, &m.thread)?;
        if tr.is_closed() {
            return Ok(());
        }
        if m.kind == MessageKind::Candidate {
            if protocol::is_give_up(&m.body) {
                return Ok(());
            }
            let accepted = accepted_results(&tr.messages, &self.ctx.roles.critique);
            let vctx = VoteContext {
                agent: &self.id,
                goal: &self.ctx.task,
                candidate: m,
                accepted_results: &accepted,
            };
            if let Some(t) = reasoner.vote(&vctx) {
                if let Some(due) = t.delay.due(now) {
                    let mentions = if self.id == planner {
                        vec![]
                    } else {
                        vec![planner]
                    };
                    self.agenda.schedule(
                        due,
                        m.thread.clone(),
                        Action::Post {
                            kind: MessageKind::Vote,
                            body: vote_text(t.value).into(),
                            mentions,
                        },
                    );
                }
            }
            return Ok(());
        }
        let version = latest_plan_version(&tr.messages, &planner);
        let key = (m.thread.clone(), version);
        if self.contributed.get(&key).copied().unwrap_or(0) >= MAX_CONTRIBUTIONS_PER_VERSION {
            return Ok(());
        }
        let plan = protocol::latest_plan(&tr.messages, &planner)
            .and_then(|p| super::plan::Plan::parse(&p.body).ok());
        let cctx = ContributeContext {
            agent: &self.id,
            goal: &self.ctx.task,
            plan: plan.as_ref(),
            message: m,
        };
        let Some(t) = reasoner.contribute(&cctx) else {
            return Ok(());
        };
        let Some(due) = t.delay.due(now) else {
            return Ok(());
        };
        let c = t.value;
        if !matches!(
            c.kind,
            MessageKind::Progress | MessageKind::Suggestion | MessageKind::Plan | MessageKind::Chat
        ) {
            return Ok(());
        }
        *self.contributed.entry(key).or_default() += 1;
        let mentions = c.mentions.into_iter().filter(|a| a != &self.id).collect();
        self.agenda.schedule(
            due,
            m.thread.clone(),
            Action::Post {
                kind: c.kind,
                body: c.body,
                mentions,
            },
        );
        Ok(())
    }
}

fn vote_text(v: Vote) -> &'static str {
    protocol::vote_body(v)
}
