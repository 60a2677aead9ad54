use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::client::A2aApi;
use crate::model::{AgentId, Message, MessageKind, ThreadId};

use super::consensus::{ConsensusDecision, ConsensusPolicy};
use super::plan::Plan;
use super::protocol::{self, is_give_up};
use super::reasoner::{DefaultReasoner, Reasoner};
use super::roles::{build_role, RoleAgent, RoleContext};
use super::{is_transport_failure, OrchError, OrchErrorCode, RoleAssignment};

/// Durations are in the driving clock's units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLimits {
    #[serde(default = "default_rounds")]
    pub max_rounds: u32,
    #[serde(default = "default_mention_timeout")]
    pub mention_response_timeout: u64,
    #[serde(default = "default_vote_timeout")]
    pub vote_collection_timeout: u64,
    #[serde(default)]
    pub consensus_policy: ConsensusPolicy,
}

fn default_rounds() -> u32 {
    8
}

fn default_mention_timeout() -> u64 {
    20
}

fn default_vote_timeout() -> u64 {
    10
}

impl Default for RunLimits {
    fn default() -> Self {
        Self::logical()
    }
}

impl RunLimits {
    /// Defaults in logical ticks.
    pub fn logical() -> Self {
        Self {
            max_rounds: default_rounds(),
            mention_response_timeout: default_mention_timeout(),
            vote_collection_timeout: default_vote_timeout(),
            consensus_policy: ConsensusPolicy::default(),
        }
    }

    /// Defaults in wall-clock milliseconds.
    pub fn wall() -> Self {
        Self {
            mention_response_timeout: 20_000,
            vote_collection_timeout: 10_000,
            ..Self::logical()
        }
    }

    /// Same limits with every duration multiplied by `unit`.
    pub fn scaled(&self, unit: u64) -> Self {
        Self {
            mention_response_timeout: self.mention_response_timeout.saturating_mul(unit),
            vote_collection_timeout: self.vote_collection_timeout.saturating_mul(unit),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_rounds < 1 {
            return Err("max_rounds must be >= 1".into());
        }
        if self.mention_response_timeout == 0 || self.vote_collection_timeout == 0 {
            return Err("timeouts must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Submitted,
    GaveUp,
    Aborted,
}

impl RunOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOutcome::Submitted => "submitted",
            RunOutcome::GaveUp => "gave_up",
            RunOutcome::Aborted => "aborted",
        }
    }
}

/// r_w as recorded by the planner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskResult {
    pub worker: AgentId,
    pub step_id: String,
    pub body: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueRecord {
    pub seq: u64,
    pub result_seq: Option<u64>,
    pub accepted: bool,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRun {
    pub task: String,
    pub thread: Option<ThreadId>,
    pub plan: Option<Plan>,
    /// Latest mapped result per step.
    pub results: BTreeMap<String, SubtaskResult>,
    pub verdicts: Vec<CritiqueRecord>,
    pub candidates: Vec<u64>,
    pub decisions: Vec<(u64, ConsensusDecision)>,
    /// Plan revisions after π₀.
    pub rounds_used: u32,
    /// Plan messages broadcast by the planner.
    pub plan_versions: u32,
    pub limits: RunLimits,
    pub outcome: Option<RunOutcome>,
    pub answer: Option<String>,
}

impl TaskRun {
    pub fn new(task: String, limits: RunLimits) -> Self {
        Self {
            task,
            thread: None,
            plan: None,
            results: BTreeMap::new(),
            verdicts: Vec::new(),
            candidates: Vec::new(),
            decisions: Vec::new(),
            rounds_used: 0,
            plan_versions: 0,
            limits,
            outcome: None,
            answer: None,
        }
    }
}

/// The registry snapshot, resolved into roles.
pub fn discover(api: &dyn A2aApi) -> Result<RoleAssignment, OrchError> {
    let agents = api.list_agents()?;
    RoleAssignment::from_registry(&agents)
}

fn refused(e: crate::error::ProtocolError) -> OrchError {
    if is_transport_failure(&e) {
        e.into()
    } else {
        OrchError::new(OrchErrorCode::Rejected, e.to_string())
    }
}

/// Posts R* mentioning every other participant, preceded by the rationale
/// when one is given. A non-give-up candidate needs at least one validated
/// result.
pub fn propose_candidate(
    api: &dyn A2aApi,
    thread: &ThreadId,
    answer: &str,
    rationale: Option<&str>,
    validated: usize,
) -> Result<u64, OrchError> {
    if validated == 0 && !is_give_up(answer) {
        return Err(OrchError::new(
            OrchErrorCode::NoValidatedResults,
            "no accepted result to compile a candidate from",
        ));
    }
    let tr = api.get_transcript(thread).map_err(refused)?;
    let others: Vec<AgentId> = tr
        .header
        .participants
        .iter()
        .filter(|p| *p != api.agent())
        .cloned()
        .collect();
    if let Some(r) = rationale {
        api.send_message(thread, MessageKind::Progress, r, &[])
            .map_err(refused)?;
    }
    let m = api
        .send_message(thread, MessageKind::Candidate, answer, &others)
        .map_err(refused)?;
    Ok(m.seq)
}

/// Posts the submission and closes the thread. Give-up candidates need no
/// decision; any other candidate needs an accepted one.
pub fn submit(
    api: &dyn A2aApi,
    thread: &ThreadId,
    candidate: &Message,
    decision: Option<&ConsensusDecision>,
) -> Result<RunOutcome, OrchError> {
    let give_up = is_give_up(&candidate.body);
    if !give_up && !decision.is_some_and(ConsensusDecision::accepted) {
        return Err(OrchError::new(
            OrchErrorCode::SubmitWithoutConsensus,
            format!("candidate #{} has no accepted consensus", candidate.seq),
        ));
    }
    api.send_message(thread, MessageKind::Submission, &candidate.body, &[])
        .map_err(refused)?;
    let summary = if give_up {
        protocol::SUMMARY_GAVE_UP.to_owned()
    } else {
        format!("{}{}", protocol::SUMMARY_SUBMITTED, candidate.body)
    };
    api.close_thread(thread, &summary).map_err(refused)?;
    Ok(if give_up {
        RunOutcome::GaveUp
    } else {
        RunOutcome::Submitted
    })
}

/// Knobs for [`run_task`] on real sessions.
#[derive(Clone)]
pub struct LiveOptions {
    /// Longest single `wait_for_mentions` call.
    pub poll_ms: u64,
    /// The whole run is aborted after this long.
    pub max_duration: Duration,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            poll_ms: 25,
            max_duration: Duration::from_secs(600),
        }
    }
}

/// Runs one task with every given session driving its role on its own
/// thread. Roles without a session are assumed to be hosted elsewhere.
/// Returns once the planner observes the thread closing.
pub fn run_task(
    task: &str,
    sessions: Vec<Arc<dyn A2aApi>>,
    mut reasoners: BTreeMap<AgentId, Box<dyn Reasoner>>,
    limits: RunLimits,
    opts: LiveOptions,
) -> Result<TaskRun, OrchError> {
    if task.trim().is_empty() {
        return Err(OrchError::aborted("empty task"));
    }
    limits.validate().map_err(OrchError::aborted)?;
    let first = sessions
        .first()
        .ok_or_else(|| OrchError::aborted("no sessions"))?;
    let roles = discover(first.as_ref())?;
    if !sessions.iter().any(|s| s.agent() == &roles.planner) {
        return Err(OrchError::aborted(format!(
            "no session for planner {}",
            roles.planner
        )));
    }
    let ctx = RoleContext {
        roles: roles.clone(),
        limits,
        task: task.to_owned(),
    };
    let origin = Instant::now();
    let clock = move || origin.elapsed().as_millis() as u64;
    let stop = Arc::new(AtomicBool::new(false));
    let mut planner_handle = None;
    let mut others = Vec::new();
    for api in sessions {
        let me = api.agent().clone();
        let reasoner = reasoners
            .remove(&me)
            .unwrap_or_else(|| Box::new(DefaultReasoner));
        let Some(role) = build_role(&me, ctx.clone(), reasoner) else {
            tracing::warn!(agent = %me, "session holds no role; ignored");
            continue;
        };
        let stop = stop.clone();
        let poll = opts.poll_ms;
        let handle = std::thread::Builder::new()
            .name(format!("role-{me}"))
            .spawn(move || drive(api, role, stop, poll, clock))
            .map_err(|e| OrchError::aborted(e.to_string()))?;
        if me == roles.planner {
            planner_handle = Some(handle);
        } else {
            others.push(handle);
        }
    }
    let planner = planner_handle.expect("planner session checked above");
    let deadline = origin + opts.max_duration;
    while !planner.is_finished() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(opts.poll_ms.clamp(1, 50)));
    }
    stop.store(true, Ordering::SeqCst);
    let timed_out = !planner.is_finished();
    let (role, result) = planner
        .join()
        .map_err(|_| OrchError::aborted("planner panicked"))?;
    for h in others {
        let _ = h.join();
    }
    if timed_out {
        return Err(OrchError::aborted("run exceeded its time budget"));
    }
    result?;
    let p = role.as_planner().expect("planner role");
    if let Some(f) = p.failure() {
        return Err(f.clone());
    }
    Ok(p.task_run())
}

type Driven = (Box<dyn RoleAgent>, Result<(), OrchError>);

fn drive(
    api: Arc<dyn A2aApi>,
    mut role: Box<dyn RoleAgent>,
    stop: Arc<AtomicBool>,
    poll_ms: u64,
    clock: impl Fn() -> u64,
) -> Driven {
    let idle = poll_ms.max(1) * 8;
    while !stop.load(Ordering::SeqCst) {
        let now = clock();
        let cap = if role.observes() {
            poll_ms.max(1)
        } else {
            idle
        };
        let wait = role
            .next_deadline()
            .map_or(cap, |d| d.saturating_sub(now).min(cap));
        let delivered = match api.wait_for_mentions(None, Some(wait)) {
            Ok(d) => d,
            Err(e) => return (role, Err(e.into())),
        };
        if let Err(e) = role.activate(api.as_ref(), clock(), &delivered) {
            tracing::warn!(agent = %role.id(), error = %e, "role stopped");
            return (role, Err(e));
        }
        if role.is_done() {
            break;
        }
    }
    (role, Ok(()))
}
