//! The decision points of every role, behind one pluggable trait.
//!
//! Durations are in the driving clock's units: ticks under the logical
//! clock, milliseconds under the wall clock.

use std::collections::BTreeSet;

use crate::model::{AgentId, AgentRegistration, Message, MessageKind};

use super::consensus::Vote;
use super::plan::{Plan, PlanDraft, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delay {
    Ticks(u64),
    /// Never completes: a permanently busy agent.
    Forever,
}

impl Delay {
    pub fn due(self, now: u64) -> Option<u64> {
        match self {
            Delay::Ticks(d) => Some(now.saturating_add(d)),
            Delay::Forever => None,
        }
    }

    pub fn scaled(self, unit: u64) -> Delay {
        match self {
            Delay::Ticks(d) => Delay::Ticks(d.saturating_mul(unit)),
            Delay::Forever => Delay::Forever,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timed<T> {
    pub delay: Delay,
    pub value: T,
}

impl<T> Timed<T> {
    pub fn now(value: T) -> Self {
        Self {
            delay: Delay::Ticks(0),
            value,
        }
    }

    pub fn after(delay: Delay, value: T) -> Self {
        Self { delay, value }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecOutcome {
    Done(String),
    Failed(String),
}

impl ExecOutcome {
    /// A failure is still a result; its body starts with `error:`.
    pub fn into_body(self) -> String {
        match self {
            ExecOutcome::Done(b) => b,
            ExecOutcome::Failed(why) if why.starts_with("error:") => why,
            ExecOutcome::Failed(why) => format!("error: {why}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept(String),
    Uncertain(String),
}

/// A free-form message o_i: progress, suggestion, chat, or a full plan
/// proposal (kind `plan`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contribution {
    pub kind: MessageKind,
    pub body: String,
    pub mentions: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compiled {
    pub answer: String,
    /// Posted as `progress` before the candidate when several results fed it.
    pub rationale: Option<String>,
}

pub struct StepContext<'a> {
    pub agent: &'a AgentId,
    pub goal: &'a str,
    pub version: u32,
    pub step: &'a Step,
}

pub struct ContributeContext<'a> {
    pub agent: &'a AgentId,
    pub goal: &'a str,
    pub plan: Option<&'a Plan>,
    pub message: &'a Message,
}

pub struct VoteContext<'a> {
    pub agent: &'a AgentId,
    pub goal: &'a str,
    pub candidate: &'a Message,
    /// Results with an `accept` verdict, in verdict order.
    pub accepted_results: &'a [Message],
}

pub struct CompileContext<'a> {
    pub agent: &'a AgentId,
    pub goal: &'a str,
    pub request: &'a Message,
    /// Results with an `accept` verdict, in verdict order.
    pub accepted_results: &'a [Message],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RevisionTrigger {
    Uncertain { result_seq: u64, step_id: String },
    NoVerdict { result_seq: u64, step_id: String },
    Unresponsive { agents: Vec<AgentId> },
    Rejected { candidate_seq: u64 },
}

pub struct RevisionContext<'a> {
    pub goal: &'a str,
    pub plan: &'a Plan,
    pub trigger: &'a RevisionTrigger,
    /// Human-readable form of the trigger, as posted in the thread.
    pub trigger_text: &'a str,
    /// Messages from other agents since the current plan was broadcast.
    pub contributions: &'a [Message],
    /// Workers that may receive steps (registered, not bypassed).
    pub available: &'a BTreeSet<AgentId>,
    /// Steps with an accepted result that is still valid.
    pub accepted: &'a BTreeSet<String>,
    /// Steps whose work must be redone by someone.
    pub rework: &'a BTreeSet<String>,
}

pub struct GiveUpContext<'a> {
    pub goal: &'a str,
    pub plan: Option<&'a Plan>,
    pub default_reason: &'a str,
}

/// Decision points of every role. Every method has a default, so a
/// reasoner only overrides what its role needs. `None` means "do not
/// respond".
pub trait Reasoner: Send {
    /// Planner: π₀. `None` or no steps fails the run with `PLANNER_FAILED`.
    fn plan_initial(&mut self, task: &str, workers: &[AgentRegistration]) -> Option<PlanDraft> {
        default_initial_plan(task, workers)
    }

    /// Planner: the next plan version. `None` gives up.
    fn revise_plan(&mut self, ctx: &RevisionContext<'_>) -> Option<PlanDraft> {
        heuristic_revision(ctx)
    }

    /// Planner: reason text appended to `give up: `.
    fn give_up_reason(&mut self, ctx: &GiveUpContext<'_>) -> String {
        ctx.default_reason.to_owned()
    }

    /// Worker: r_w = w(φ(w)).
    fn execute(&mut self, ctx: &StepContext<'_>) -> Timed<ExecOutcome> {
        Timed::now(ExecOutcome::Failed(format!(
            "no executor configured for step {}",
            ctx.step.id
        )))
    }

    /// Critique: verdict on one result message.
    fn critique(&mut self, result: &Message) -> Option<Timed<Verdict>> {
        Some(Timed::now(default_verdict(&result.body)))
    }

    /// Answer-finding: R* from the accepted results.
    fn compile(&mut self, ctx: &CompileContext<'_>) -> Option<Timed<Compiled>> {
        default_compile(ctx.accepted_results).map(Timed::now)
    }

    /// Any polled agent: v_i(R*).
    fn vote(&mut self, ctx: &VoteContext<'_>) -> Option<Timed<Vote>> {
        Some(Timed::now(default_vote(ctx)))
    }

    /// Any agent: reaction to a mention that carries no obligation.
    fn contribute(&mut self, _ctx: &ContributeContext<'_>) -> Option<Timed<Contribution>> {
        None
    }
}

/// Uses every default.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultReasoner;

impl Reasoner for DefaultReasoner {}

/// One step carrying the whole task, given to the first worker.
pub fn default_initial_plan(task: &str, workers: &[AgentRegistration]) -> Option<PlanDraft> {
    let first = workers.iter().map(|w| &w.id).min()?;
    Some(PlanDraft {
        goal: Some(task.to_owned()),
        steps: vec![Step::new("s1", task)],
        allocation: Some(
            [(first.clone(), vec!["s1".to_owned()])]
                .into_iter()
                .collect(),
        ),
        ..PlanDraft::default()
    })
}

pub fn default_verdict(body: &str) -> Verdict {
    let t = body.trim();
    if t.is_empty() {
        Verdict::Uncertain("empty result".into())
    } else if t.starts_with("error") {
        Verdict::Uncertain("the worker reported a failure".into())
    } else {
        Verdict::Accept("result is well-formed".into())
    }
}

/// The latest accepted result wins; a rationale is attached when more than
/// one result was available.
pub fn default_compile(accepted: &[Message]) -> Option<Compiled> {
    let chosen = accepted.last()?;
    let rationale = (accepted.len() > 1).then(|| {
        let all: Vec<u64> = accepted.iter().map(|m| m.seq).collect();
        super::protocol::compile_rationale(chosen.seq, &all, "most recently accepted by critique")
    });
    Some(Compiled {
        answer: chosen.body.trim().to_owned(),
        rationale,
    })
}

/// Approve iff the candidate appears in some accepted result.
pub fn default_vote(ctx: &VoteContext<'_>) -> Vote {
    let c = ctx.candidate.body.trim();
    if !c.is_empty() && ctx.accepted_results.iter().any(|r| r.body.contains(c)) {
        Vote::Approve
    } else {
        Vote::Reject
    }
}

/// Keeps settled steps, moves rework, orphaned steps and settled steps of
/// unavailable workers to the next available worker in sorted cyclic
/// order, and drops steps nobody can take. `None` when nothing is left to
/// do.
pub fn heuristic_revision(ctx: &RevisionContext<'_>) -> Option<PlanDraft> {
    let pool: Vec<&AgentId> = ctx.available.iter().collect();
    let mut steps = Vec::new();
    let mut allocation: std::collections::BTreeMap<AgentId, Vec<String>> = Default::default();
    let mut open = 0usize;
    for s in &ctx.plan.steps {
        let owner = ctx.plan.owner(&s.id);
        let settled = ctx.accepted.contains(&s.id) && !ctx.rework.contains(&s.id);
        let owner_ok = owner.is_some_and(|o| ctx.available.contains(o));
        let target = if settled && owner_ok {
            owner.cloned()
        } else if settled {
            next_worker(&pool, owner, false)
        } else if owner_ok && !ctx.rework.contains(&s.id) {
            owner.cloned()
        } else {
            next_worker(&pool, owner, ctx.rework.contains(&s.id))
        };
        let Some(w) = target else { continue };
        if !settled {
            open += 1;
        }
        allocation.entry(w).or_default().push(s.id.clone());
        steps.push(s.clone());
    }
    if open == 0 {
        return None;
    }
    Some(PlanDraft {
        goal: Some(ctx.plan.goal.clone()),
        steps,
        allocation: Some(allocation),
        ..PlanDraft::default()
    })
}

/// Worker after `prev` in cyclic order. A reworked step may fall back to
/// `prev` when it is the only one available.
fn next_worker(pool: &[&AgentId], prev: Option<&AgentId>, allow_prev: bool) -> Option<AgentId> {
    if pool.is_empty() {
        return None;
    }
    let start = match prev {
        Some(p) => pool.iter().position(|w| *w > p).unwrap_or(0),
        None => 0,
    };
    (0..pool.len())
        .map(|i| pool[(start + i) % pool.len()])
        .find(|w| Some(*w) != prev)
        .or_else(|| prev.filter(|p| allow_prev && pool.contains(p)))
        .cloned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Role, ThreadId};

    fn a(s: &str) -> AgentId {
        AgentId::new(s).unwrap()
    }

    fn msg(seq: u64, body: &str) -> Message {
        Message {
            seq,
            thread: ThreadId::parse(&"b".repeat(32)).unwrap(),
            sender: a("web"),
            kind: MessageKind::Result,
            body: body.into(),
            mentions: vec![],
            ts_ms: 0,
        }
    }

    fn plan_two() -> Plan {
        Plan {
            version: 0,
            goal: "g".into(),
            steps: vec![Step::new("s1", "a"), Step::new("s2", "b")],
            allocation: [
                (a("web"), vec!["s1".to_string()]),
                (a("document_processing"), vec!["s2".to_string()]),
            ]
            .into_iter()
            .collect(),
        }
    }

    #[test]
    fn failures_become_error_bodies() {
        assert_eq!(
            ExecOutcome::Failed("boom".into()).into_body(),
            "error: boom"
        );
        assert_eq!(
            ExecOutcome::Failed("error: x".into()).into_body(),
            "error: x"
        );
        assert!(matches!(default_verdict("error: x"), Verdict::Uncertain(_)));
        assert!(matches!(default_verdict("2732"), Verdict::Accept(_)));
    }

    #[test]
    fn compile_prefers_latest_and_explains() {
        assert!(default_compile(&[]).is_none());
        let one = default_compile(&[msg(4, "2732")]).unwrap();
        assert_eq!(one.answer, "2732");
        assert!(one.rationale.is_none());
        let two = default_compile(&[msg(4, "2731"), msg(9, "2732")]).unwrap();
        assert_eq!(two.answer, "2732");
        assert!(two.rationale.unwrap().contains("chose #9"));
    }

    #[test]
    fn bypassed_step_moves_and_unplaceable_step_drops() {
        let plan = plan_two();
        let trig = RevisionTrigger::Unresponsive {
            agents: vec![a("web")],
        };
        let available: BTreeSet<AgentId> = [a("document_processing"), a("reasoning_coding")].into();
        let accepted = BTreeSet::new();
        let rework = BTreeSet::new();
        let ctx = RevisionContext {
            goal: "g",
            plan: &plan,
            trigger: &trig,
            trigger_text: "",
            contributions: &[],
            available: &available,
            accepted: &accepted,
            rework: &rework,
        };
        let d = heuristic_revision(&ctx).unwrap();
        let alloc = d.allocation.unwrap();
        // Cyclic successor of "web" in the sorted pool wraps to the start.
        assert_eq!(
            alloc[&a("document_processing")],
            vec!["s1".to_string(), "s2".to_string()]
        );
        assert!(!alloc.contains_key(&a("reasoning_coding")));
        assert!(!alloc.contains_key(&a("web")));

        let only_dp: BTreeSet<AgentId> = [a("document_processing")].into();
        let plan1 = Plan {
            steps: vec![Step::new("s1", "a")],
            allocation: [(a("web"), vec!["s1".to_string()])].into_iter().collect(),
            ..plan.clone()
        };
        let none: BTreeSet<AgentId> = BTreeSet::new();
        let ctx = RevisionContext {
            available: &none,
            plan: &plan1,
            ..ctx
        };
        assert!(heuristic_revision(&ctx).is_none());
        let ctx = RevisionContext {
            available: &only_dp,
            ..ctx
        };
        let d = heuristic_revision(&ctx).unwrap();
        assert_eq!(
            d.allocation.unwrap()[&a("document_processing")],
            vec!["s1".to_string()]
        );
    }

    #[test]
    fn rework_prefers_another_worker_then_falls_back() {
        let plan = Plan {
            steps: vec![Step::new("s1", "a")],
            allocation: [(a("web"), vec!["s1".to_string()])].into_iter().collect(),
            ..plan_two()
        };
        let trig = RevisionTrigger::Uncertain {
            result_seq: 3,
            step_id: "s1".into(),
        };
        let rework: BTreeSet<String> = ["s1".to_string()].into();
        let accepted = BTreeSet::new();
        let both: BTreeSet<AgentId> = [a("web"), a("reasoning_coding")].into();
        let ctx = RevisionContext {
            goal: "g",
            plan: &plan,
            trigger: &trig,
            trigger_text: "",
            contributions: &[],
            available: &both,
            accepted: &accepted,
            rework: &rework,
        };
        let d = heuristic_revision(&ctx).unwrap();
        assert_eq!(
            d.allocation.unwrap()[&a("reasoning_coding")],
            vec!["s1".to_string()]
        );
        let web_only: BTreeSet<AgentId> = [a("web")].into();
        let ctx = RevisionContext {
            available: &web_only,
            ..ctx
        };
        assert_eq!(
            heuristic_revision(&ctx).unwrap().allocation.unwrap()[&a("web")],
            vec!["s1".to_string()]
        );
    }

    #[test]
    fn default_plan_uses_smallest_worker_id() {
        let ws = vec![
            AgentRegistration::new(a("web"), "w", Role::Worker),
            AgentRegistration::new(a("document_processing"), "d", Role::Worker),
        ];
        let d = default_initial_plan("task", &ws).unwrap();
        assert!(d
            .allocation
            .unwrap()
            .contains_key(&a("document_processing")));
        assert!(default_initial_plan("task", &[]).is_none());
    }
}
