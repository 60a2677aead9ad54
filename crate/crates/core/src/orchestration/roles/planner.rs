use std::collections::{BTreeMap, BTreeSet};

use crate::client::A2aApi;
use crate::model::{AgentId, Message, MessageKind, ThreadId, Transcript};
use crate::orchestration::consensus::{collect_votes, decide_consensus, Vote};
use crate::orchestration::plan::{Plan, PlanDraft};
use crate::orchestration::protocol::{self, VerdictKind};
use crate::orchestration::reasoner::{
    heuristic_revision, GiveUpContext, Reasoner, RevisionContext, RevisionTrigger, VoteContext,
};
use crate::orchestration::run::{CritiqueRecord, RunOutcome, SubtaskResult, TaskRun};
use crate::orchestration::{OrchError, OrchErrorCode};

use super::{post, transcript, RoleAgent, RoleContext};

#[derive(Debug, Clone, PartialEq, Eq)]
enum StepStatus {
    Pending,
    Awaiting { result_seq: u64, since: u64 },
    Accepted { result_seq: u64 },
    Uncertain { result_seq: u64, rationale: String },
}

#[derive(Debug, Clone)]
struct StepTrack {
    owner: AgentId,
    assigned_at: u64,
    reminded: bool,
    status: StepStatus,
}

#[derive(Debug, Clone)]
enum Phase {
    Init,
    Working,
    Discussion {
        deadline: u64,
        awaiting: BTreeSet<AgentId>,
        trigger: RevisionTrigger,
        text: String,
    },
    AwaitCandidate {
        deadline: u64,
    },
    Voting {
        candidate: u64,
        polled: BTreeSet<AgentId>,
        voted: BTreeSet<AgentId>,
        deadline: u64,
    },
    AwaitSubmission {
        deadline: u64,
    },
    Done,
}

/// p: owns the [`TaskRun`]. Seeds π₀, tracks every step through result
/// and verdict, bypasses silent workers, revises the plan, runs the vote
/// and hands the accepted candidate to answer-finding.
pub struct Planner {
    id: AgentId,
    ctx: RoleContext,
    reasoner: Box<dyn Reasoner>,
    run: TaskRun,
    plan: Option<Plan>,
    steps: BTreeMap<String, StepTrack>,
    members: BTreeSet<AgentId>,
    bypassed: BTreeSet<AgentId>,
    contributions: Vec<Message>,
    seen: u64,
    phase: Phase,
    own_vote: Option<(u64, u64, Vote)>,
    give_up_reason: Option<String>,
    failure: Option<OrchError>,
}

impl Planner {
    pub fn new(ctx: RoleContext, reasoner: Box<dyn Reasoner>) -> Self {
        Self {
            id: ctx.roles.planner.clone(),
            run: TaskRun::new(ctx.task.clone(), ctx.limits.clone()),
            ctx,
            reasoner,
            plan: None,
            steps: BTreeMap::new(),
            members: BTreeSet::new(),
            bypassed: BTreeSet::new(),
            contributions: Vec::new(),
            seen: 0,
            phase: Phase::Init,
            own_vote: None,
            give_up_reason: None,
            failure: None,
        }
    }

    /// Snapshot of the run as the planner sees it.
    pub fn task_run(&self) -> TaskRun {
        let mut run = self.run.clone();
        run.plan = self.plan.clone();
        run
    }

    /// Set when the run ended without reaching a thread close.
    pub fn failure(&self) -> Option<&OrchError> {
        self.failure.as_ref()
    }

    pub fn thread(&self) -> Option<&ThreadId> {
        self.run.thread.as_ref()
    }

    fn limits_timeout(&self) -> u64 {
        self.ctx.limits.mention_response_timeout
    }

    fn fail(&mut self, e: OrchError) -> Result<(), OrchError> {
        self.failure = Some(e.clone());
        self.run.outcome = Some(RunOutcome::Aborted);
        self.phase = Phase::Done;
        Err(e)
    }

    fn start(&mut self, api: &dyn A2aApi, now: u64) -> Result<(), OrchError> {
        if self.ctx.task.trim().is_empty() {
            return self.fail(OrchError::aborted("empty task"));
        }
        let agents = match api.list_agents() {
            Ok(a) => a,
            Err(e) => return self.fail(e.into()),
        };
        let workers: Vec<_> = agents
            .into_iter()
            .filter(|a| self.ctx.roles.workers.contains(&a.id))
            .collect();
        let pool: BTreeSet<AgentId> = workers.iter().map(|w| w.id.clone()).collect();
        let draft = self
            .reasoner
            .plan_initial(&self.ctx.task, &workers)
            .filter(|d| !d.steps.is_empty());
        let Some(draft) = draft else {
            return self.fail(OrchError::new(
                OrchErrorCode::PlannerFailed,
                "the planner produced no steps",
            ));
        };
        let plan = match Plan::from_draft(0, &self.ctx.task, draft, &pool) {
            Ok(p) => p,
            Err(why) => {
                return self.fail(OrchError::new(OrchErrorCode::PlannerFailed, why));
            }
        };
        let mut participants = vec![
            self.ctx.roles.critique.clone(),
            self.ctx.roles.answer_finding.clone(),
        ];
        participants.extend(plan.workers());
        let thread = match api.create_thread(&participants) {
            Ok(t) => t,
            Err(e) => return self.fail(e.into()),
        };
        tracing::info!(thread = %thread, steps = plan.steps.len(), "plan v0 broadcast");
        self.members = participants.into_iter().collect();
        self.members.insert(self.id.clone());
        self.run.thread = Some(thread.clone());
        post(api, &thread, MessageKind::Plan, &plan.encode(), &[])?;
        self.run.plan_versions = 1;
        for w in plan.workers() {
            let steps = plan.steps_of(&w);
            post(
                api,
                &thread,
                MessageKind::Chat,
                &protocol::directive(&w, plan.version, &steps),
                std::slice::from_ref(&w),
            )?;
            for s in steps {
                self.steps.insert(
                    s.id.clone(),
                    StepTrack {
                        owner: w.clone(),
                        assigned_at: now,
                        reminded: false,
                        status: StepStatus::Pending,
                    },
                );
            }
        }
        self.plan = Some(plan);
        self.phase = Phase::Working;
        Ok(())
    }

    fn thread_id(&self) -> ThreadId {
        self.run.thread.clone().expect("thread exists after start")
    }

    fn plan_ref(&self) -> &Plan {
        self.plan.as_ref().expect("plan exists after start")
    }

    fn observe(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        m: &Message,
        tr: &Transcript,
    ) -> Result<(), OrchError> {
        if m.sender == self.id {
            return Ok(());
        }
        let roles = &self.ctx.roles;
        match m.kind {
            MessageKind::Result if roles.workers.contains(&m.sender) => {
                let plan_order: Vec<String> =
                    self.plan_ref().steps.iter().map(|s| s.id.clone()).collect();
                let slot = plan_order.iter().find(|id| {
                    self.steps
                        .get(*id)
                        .is_some_and(|t| t.owner == m.sender && t.status == StepStatus::Pending)
                });
                match slot {
                    Some(id) => {
                        let id = id.clone();
                        if let Some(t) = self.steps.get_mut(&id) {
                            t.status = StepStatus::Awaiting {
                                result_seq: m.seq,
                                since: now,
                            };
                        }
                        self.run.results.insert(
                            id.clone(),
                            SubtaskResult {
                                worker: m.sender.clone(),
                                step_id: id,
                                body: m.body.clone(),
                                seq: m.seq,
                            },
                        );
                    }
                    None => self.contributions.push(m.clone()),
                }
            }
            MessageKind::Critique if m.sender == roles.critique => {
                let Some(v) = protocol::parse_verdict(&m.body) else {
                    return Ok(());
                };
                let Some(rs) = v.result_seq else {
                    self.contributions.push(m.clone());
                    return Ok(());
                };
                if self.run.verdicts.iter().any(|r| r.result_seq == Some(rs)) {
                    return Ok(());
                }
                self.run.verdicts.push(CritiqueRecord {
                    seq: m.seq,
                    result_seq: Some(rs),
                    accepted: v.kind == VerdictKind::Accept,
                    rationale: v.rationale.clone(),
                });
                for t in self.steps.values_mut() {
                    if matches!(t.status, StepStatus::Awaiting { result_seq, .. } if result_seq == rs)
                    {
                        t.status = match v.kind {
                            VerdictKind::Accept => StepStatus::Accepted { result_seq: rs },
                            VerdictKind::Uncertain => StepStatus::Uncertain {
                                result_seq: rs,
                                rationale: v.rationale.clone(),
                            },
                        };
                    }
                }
            }
            MessageKind::Plan => {
                let current = self.plan_ref().version;
                let proposal = Plan::parse(&m.body)
                    .ok()
                    .filter(|p| p.version == current + 1);
                let open = matches!(self.phase, Phase::Working | Phase::Discussion { .. });
                match proposal {
                    Some(p) if open => {
                        let draft = PlanDraft {
                            version: Some(p.version),
                            goal: Some(p.goal),
                            steps: p.steps,
                            allocation: Some(p.allocation),
                        };
                        let text = format!("plan proposal #{} from {}", m.seq, m.sender);
                        self.adopt_draft(api, now, draft, &BTreeSet::new(), &text, true)?;
                    }
                    _ => self.contributions.push(m.clone()),
                }
            }
            MessageKind::Candidate if m.sender == roles.answer_finding => {
                if protocol::is_give_up(&m.body) {
                    return Ok(());
                }
                if matches!(
                    self.phase,
                    Phase::Voting { .. } | Phase::AwaitSubmission { .. } | Phase::Done
                ) {
                    return Ok(());
                }
                self.start_vote(api, now, m, tr)?;
            }
            MessageKind::Vote => {
                if let Phase::Voting { polled, voted, .. } = &mut self.phase {
                    if polled.contains(&m.sender) && Vote::parse(&m.body).is_some() {
                        voted.insert(m.sender.clone());
                    }
                }
            }
            MessageKind::Submission => {}
            _ => {
                if let Phase::Discussion { awaiting, .. } = &mut self.phase {
                    awaiting.remove(&m.sender);
                }
                self.contributions.push(m.clone());
            }
        }
        Ok(())
    }

    fn accepted_messages(&self, tr: &Transcript) -> Vec<Message> {
        let mut seqs: Vec<(u64, u64)> = Vec::new();
        for s in &self.plan_ref().steps {
            if let Some(StepStatus::Accepted { result_seq }) =
                self.steps.get(&s.id).map(|t| &t.status)
            {
                let vseq = self
                    .run
                    .verdicts
                    .iter()
                    .find(|v| v.result_seq == Some(*result_seq))
                    .map_or(0, |v| v.seq);
                seqs.push((vseq, *result_seq));
            }
        }
        seqs.sort();
        seqs.iter()
            .filter_map(|(_, r)| tr.messages.iter().find(|m| m.seq == *r).cloned())
            .collect()
    }

    fn start_vote(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        cand: &Message,
        tr: &Transcript,
    ) -> Result<(), OrchError> {
        self.run.candidates.push(cand.seq);
        let mut polled: BTreeSet<AgentId> = tr.header.participants.iter().cloned().collect();
        polled.remove(&self.ctx.roles.answer_finding);
        let deadline = now + self.ctx.limits.vote_collection_timeout;
        self.phase = Phase::Voting {
            candidate: cand.seq,
            polled: polled.clone(),
            voted: BTreeSet::new(),
            deadline,
        };
        self.own_vote = None;
        if polled.contains(&self.id) {
            let accepted = self.accepted_messages(tr);
            let vctx = VoteContext {
                agent: &self.id,
                goal: &self.ctx.task,
                candidate: cand,
                accepted_results: &accepted,
            };
            if let Some(t) = self.reasoner.vote(&vctx) {
                if let Some(due) = t.delay.due(now) {
                    self.own_vote = Some((due, cand.seq, t.value));
                }
            }
        }
        self.cast_own_vote(api, now)
    }

    fn cast_own_vote(&mut self, api: &dyn A2aApi, now: u64) -> Result<(), OrchError> {
        let Some((due, cand, vote)) = self.own_vote else {
            return Ok(());
        };
        if due > now {
            return Ok(());
        }
        self.own_vote = None;
        if let Phase::Voting {
            candidate, voted, ..
        } = &mut self.phase
        {
            if *candidate == cand && voted.insert(self.id.clone()) {
                let thread = self.thread_id();
                post(api, &thread, MessageKind::Vote, vote.as_str(), &[])?;
            }
        }
        Ok(())
    }

    /// Timers and phase transitions. Returns whether anything changed.
    fn advance(&mut self, api: &dyn A2aApi, now: u64, tr: &Transcript) -> Result<bool, OrchError> {
        let timeout = self.limits_timeout();
        let thread = self.thread_id();
        match self.phase.clone() {
            Phase::Init | Phase::Done => Ok(false),
            Phase::Working => {
                let mut silent: BTreeMap<AgentId, Vec<String>> = BTreeMap::new();
                let mut no_verdict = None;
                let mut remind: BTreeMap<AgentId, Vec<String>> = BTreeMap::new();
                let order: Vec<String> =
                    self.plan_ref().steps.iter().map(|s| s.id.clone()).collect();
                for id in &order {
                    let Some(t) = self.steps.get(id) else {
                        continue;
                    };
                    match &t.status {
                        StepStatus::Pending => {
                            let waited = now.saturating_sub(t.assigned_at);
                            if waited >= timeout {
                                silent.entry(t.owner.clone()).or_default().push(id.clone());
                            } else if !t.reminded && waited >= reminder_after(timeout) {
                                remind.entry(t.owner.clone()).or_default().push(id.clone());
                            }
                        }
                        StepStatus::Awaiting { result_seq, since }
                            if no_verdict.is_none() && now.saturating_sub(*since) >= timeout =>
                        {
                            no_verdict = Some((*result_seq, id.clone()));
                        }
                        _ => {}
                    }
                }
                if !silent.is_empty() {
                    for (w, ids) in &silent {
                        post(
                            api,
                            &thread,
                            MessageKind::Progress,
                            &protocol::bypass_note(w, ids, timeout),
                            &[],
                        )?;
                        self.bypassed.insert(w.clone());
                    }
                    let trigger = RevisionTrigger::Unresponsive {
                        agents: silent.keys().cloned().collect(),
                    };
                    let names: Vec<&str> = silent.keys().map(AgentId::as_str).collect();
                    let text = format!("unresponsive: {}", names.join(", "));
                    self.revise(api, now, trigger, &text, BTreeSet::new())?;
                    return Ok(true);
                }
                for (w, ids) in &remind {
                    let version = self.plan_ref().version;
                    let waited = ids
                        .iter()
                        .filter_map(|i| self.steps.get(i))
                        .map(|t| now.saturating_sub(t.assigned_at))
                        .max()
                        .unwrap_or(0);
                    let mentions = [
                        w.clone(),
                        self.ctx.roles.critique.clone(),
                        self.ctx.roles.answer_finding.clone(),
                    ];
                    post(
                        api,
                        &thread,
                        MessageKind::Chat,
                        &protocol::reminder(w, ids, version, waited),
                        &mentions,
                    )?;
                    for i in ids {
                        if let Some(t) = self.steps.get_mut(i) {
                            t.reminded = true;
                        }
                    }
                }
                if let Some((rs, step_id)) = no_verdict {
                    let text = format!("no verdict on result #{rs} for step {step_id}");
                    let rework = BTreeSet::from([step_id.clone()]);
                    self.revise(
                        api,
                        now,
                        RevisionTrigger::NoVerdict {
                            result_seq: rs,
                            step_id,
                        },
                        &text,
                        rework,
                    )?;
                    return Ok(true);
                }
                let uncertain = order
                    .iter()
                    .find_map(|id| match &self.steps.get(id)?.status {
                        StepStatus::Uncertain {
                            result_seq,
                            rationale,
                        } => Some((id.clone(), *result_seq, rationale.clone())),
                        _ => None,
                    });
                if let Some((step_id, rs, rationale)) = uncertain {
                    let body = protocol::discussion_prompt(
                        &self.ctx.roles.critique,
                        &self.ctx.roles.answer_finding,
                        rs,
                        &step_id,
                        &rationale,
                    );
                    post(api, &thread, MessageKind::Chat, &body, &[])?;
                    self.phase = Phase::Discussion {
                        deadline: now + self.ctx.limits.vote_collection_timeout,
                        awaiting: BTreeSet::from([
                            self.ctx.roles.critique.clone(),
                            self.ctx.roles.answer_finding.clone(),
                        ]),
                        trigger: RevisionTrigger::Uncertain {
                            result_seq: rs,
                            step_id,
                        },
                        text: body,
                    };
                    return Ok(true);
                }
                let all_accepted = !self.steps.is_empty()
                    && self
                        .steps
                        .values()
                        .all(|t| matches!(t.status, StepStatus::Accepted { .. }));
                if all_accepted {
                    let results: Vec<u64> =
                        self.accepted_messages(tr).iter().map(|m| m.seq).collect();
                    let body = protocol::compile_request(
                        &self.ctx.roles.answer_finding,
                        self.plan_ref().version,
                        &results,
                    );
                    post(api, &thread, MessageKind::Chat, &body, &[])?;
                    self.phase = Phase::AwaitCandidate {
                        deadline: now + timeout,
                    };
                    return Ok(true);
                }
                Ok(false)
            }
            Phase::Discussion {
                deadline,
                awaiting,
                trigger,
                text,
            } => {
                if awaiting.is_empty() || now >= deadline {
                    let rework: BTreeSet<String> = self
                        .steps
                        .iter()
                        .filter(|(_, t)| matches!(t.status, StepStatus::Uncertain { .. }))
                        .map(|(id, _)| id.clone())
                        .collect();
                    self.revise(api, now, trigger, &text, rework)?;
                    return Ok(true);
                }
                Ok(false)
            }
            Phase::AwaitCandidate { deadline } => {
                if now >= deadline {
                    self.fallback(api, "the answer-finding agent did not propose a candidate")?;
                    return Ok(true);
                }
                Ok(false)
            }
            Phase::Voting {
                candidate,
                polled,
                voted,
                deadline,
            } => {
                self.cast_own_vote(api, now)?;
                let voted_now = match &self.phase {
                    Phase::Voting { voted, .. } => voted.len(),
                    _ => voted.len(),
                };
                if voted_now < polled.len() && now < deadline {
                    return Ok(false);
                }
                let tr = transcript(api, &thread)?;
                let votes: Vec<Vote> = collect_votes(&tr.messages, candidate, &polled, None)
                    .into_iter()
                    .map(|(_, v)| v)
                    .collect();
                let decision =
                    decide_consensus(&votes, polled.len(), self.ctx.limits.consensus_policy);
                let accepted = decision.accepted();
                let f = self.ctx.roles.answer_finding.clone();
                let note =
                    protocol::consensus_note(accepted.then_some(&f), candidate, &polled, &decision);
                post(api, &thread, MessageKind::Progress, &note, &[])?;
                self.run.decisions.push((candidate, decision));
                if accepted {
                    self.phase = Phase::AwaitSubmission {
                        deadline: now + timeout,
                    };
                } else {
                    let rework: BTreeSet<String> = self
                        .steps
                        .iter()
                        .filter(|(_, t)| matches!(t.status, StepStatus::Accepted { .. }))
                        .map(|(id, _)| id.clone())
                        .collect();
                    self.phase = Phase::Working;
                    let text = format!("candidate #{candidate} rejected");
                    self.revise(
                        api,
                        now,
                        RevisionTrigger::Rejected {
                            candidate_seq: candidate,
                        },
                        &text,
                        rework,
                    )?;
                }
                Ok(true)
            }
            Phase::AwaitSubmission { deadline } => {
                if now >= deadline {
                    self.fallback(api, "the answer-finding agent did not submit")?;
                    return Ok(true);
                }
                Ok(false)
            }
        }
    }

    fn revise(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        trigger: RevisionTrigger,
        text: &str,
        rework: BTreeSet<String>,
    ) -> Result<(), OrchError> {
        if self.run.rounds_used >= self.ctx.limits.max_rounds {
            let reason = format!(
                "{}: {} plan revisions used without a validated answer",
                OrchErrorCode::MaxRoundsExceeded,
                self.run.rounds_used
            );
            return self.give_up(api, now, &reason);
        }
        let available: BTreeSet<AgentId> = self
            .ctx
            .roles
            .workers
            .difference(&self.bypassed)
            .cloned()
            .collect();
        let accepted: BTreeSet<String> = self
            .steps
            .iter()
            .filter(|(_, t)| matches!(t.status, StepStatus::Accepted { .. }))
            .map(|(id, _)| id.clone())
            .collect();
        let plan = self.plan_ref().clone();
        let contributions = std::mem::take(&mut self.contributions);
        let rctx = RevisionContext {
            goal: &plan.goal,
            plan: &plan,
            trigger: &trigger,
            trigger_text: text,
            contributions: &contributions,
            available: &available,
            accepted: &accepted,
            rework: &rework,
        };
        let proposed = self.reasoner.revise_plan(&rctx);
        let valid = proposed
            .and_then(|d| Plan::from_draft(plan.version + 1, &plan.goal, d, &available).ok());
        let draft = match valid {
            Some(p) => Some(PlanDraft {
                version: None,
                goal: Some(p.goal),
                steps: p.steps,
                allocation: Some(p.allocation),
            }),
            None => heuristic_revision(&rctx),
        };
        let Some(draft) = draft else {
            let reason = self.default_give_up_reason(&trigger);
            return self.give_up(api, now, &reason);
        };
        let text = text.to_owned();
        self.adopt_draft(api, now, draft, &rework, &text, false)
    }

    fn default_give_up_reason(&self, trigger: &RevisionTrigger) -> String {
        let silent: Vec<&str> = self.bypassed.iter().map(AgentId::as_str).collect();
        let (names, agents, has, its) = match silent.as_slice() {
            [one] => ((*one).to_owned(), "agent", "has", "its"),
            [init @ .., last] => (
                format!("{} and {last}", init.join(", ")),
                "agents",
                "have",
                "their",
            ),
            [] => (String::new(), "", "", ""),
        };
        match trigger {
            RevisionTrigger::Unresponsive { .. } => format!(
                "The {names} {agents} {has} not provided any result despite reminders, and no other worker can take over {its} steps. Without that data the answer cannot be determined."
            ),
            _ if !silent.is_empty() => format!(
                "No validated result could be produced; the {names} {agents} did not respond."
            ),
            _ => "No validated result could be produced by the available workers.".to_owned(),
        }
    }

    /// Installs the next plan version: membership, cancellations, the
    /// broadcast and one directive per worker with new work.
    fn adopt_draft(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        draft: PlanDraft,
        rework: &BTreeSet<String>,
        text: &str,
        is_proposal: bool,
    ) -> Result<(), OrchError> {
        if self.run.rounds_used >= self.ctx.limits.max_rounds {
            if is_proposal {
                return Ok(());
            }
            return self.give_up(api, now, "MAX_ROUNDS_EXCEEDED");
        }
        let old = self.plan_ref().clone();
        let available: BTreeSet<AgentId> = self
            .ctx
            .roles
            .workers
            .difference(&self.bypassed)
            .cloned()
            .collect();
        let plan = match Plan::from_draft(old.version + 1, &old.goal, draft, &available) {
            Ok(p) => p,
            Err(why) if is_proposal => {
                tracing::debug!(why, "plan proposal rejected");
                return Ok(());
            }
            // Staying on the current plan would re-fire the same trigger.
            Err(why) => return self.give_up(api, now, &format!("no valid plan revision: {why}")),
        };
        let thread = self.thread_id();
        self.run.rounds_used += 1;
        for w in plan.workers() {
            if !self.members.contains(&w) {
                match api.add_participant(&thread, &w) {
                    Ok(()) => {
                        self.members.insert(w);
                    }
                    Err(e) if crate::orchestration::is_transport_failure(&e) => {
                        return Err(e.into())
                    }
                    Err(e) => tracing::debug!(error = %e, "add_participant failed"),
                }
            }
        }
        let mut cancelled: BTreeMap<AgentId, Vec<String>> = BTreeMap::new();
        for s in &old.steps {
            let Some(prev) = old.owner(&s.id) else {
                continue;
            };
            if plan.owner(&s.id) != Some(prev) {
                cancelled
                    .entry(prev.clone())
                    .or_default()
                    .push(s.id.clone());
            }
        }
        for (w, ids) in &cancelled {
            post(
                api,
                &thread,
                MessageKind::System,
                &protocol::cancellation(plan.version, w, ids),
                &[],
            )?;
        }
        post(api, &thread, MessageKind::Plan, &plan.encode(), &[])?;
        self.run.plan_versions += 1;
        tracing::info!(thread = %thread, version = plan.version, trigger = text, "plan revised");

        let mut next: BTreeMap<String, StepTrack> = BTreeMap::new();
        let mut fresh: BTreeMap<AgentId, Vec<String>> = BTreeMap::new();
        for s in &plan.steps {
            let owner = plan.owner(&s.id).expect("validated plan").clone();
            // An accepted step moved off a bypassed worker keeps its result.
            let keep = self.steps.get(&s.id).filter(|t| {
                let settled_move = matches!(t.status, StepStatus::Accepted { .. })
                    && self.bypassed.contains(&t.owner);
                (t.owner == owner || settled_move)
                    && !rework.contains(&s.id)
                    && !matches!(t.status, StepStatus::Uncertain { .. })
            });
            match keep {
                Some(t) => {
                    let mut t = t.clone();
                    t.owner = owner;
                    next.insert(s.id.clone(), t);
                }
                None => {
                    fresh.entry(owner.clone()).or_default().push(s.id.clone());
                    next.insert(
                        s.id.clone(),
                        StepTrack {
                            owner,
                            assigned_at: now,
                            reminded: false,
                            status: StepStatus::Pending,
                        },
                    );
                }
            }
        }
        for (w, ids) in &fresh {
            let steps: Vec<_> = ids.iter().filter_map(|i| plan.step(i)).collect();
            post(
                api,
                &thread,
                MessageKind::Chat,
                &protocol::directive(w, plan.version, &steps),
                std::slice::from_ref(w),
            )?;
        }
        self.steps = next;
        self.plan = Some(plan);
        self.contributions.clear();
        self.phase = Phase::Working;
        Ok(())
    }

    fn give_up(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        default_reason: &str,
    ) -> Result<(), OrchError> {
        let gctx = GiveUpContext {
            goal: &self.ctx.task,
            plan: self.plan.as_ref(),
            default_reason,
        };
        let reason = self.reasoner.give_up_reason(&gctx);
        let reason = reason.trim();
        let reason = reason
            .strip_prefix(protocol::GIVE_UP_PREFIX)
            .unwrap_or(reason)
            .trim();
        let reason = if reason.is_empty() {
            default_reason
        } else {
            reason
        }
        .to_owned();
        let thread = self.thread_id();
        let body = protocol::give_up_instruction(&self.ctx.roles.answer_finding, &reason);
        post(api, &thread, MessageKind::Chat, &body, &[])?;
        self.give_up_reason = Some(reason);
        self.phase = Phase::AwaitSubmission {
            deadline: now + self.limits_timeout(),
        };
        Ok(())
    }

    /// Answer-finding never closed the run: the planner gives up itself.
    fn fallback(&mut self, api: &dyn A2aApi, why: &str) -> Result<(), OrchError> {
        let reason = self
            .give_up_reason
            .clone()
            .unwrap_or_else(|| why.to_owned());
        let answer = format!("{}{reason}", protocol::GIVE_UP_PREFIX);
        let thread = self.thread_id();
        post(api, &thread, MessageKind::Submission, &answer, &[])?;
        match api.close_thread(&thread, protocol::SUMMARY_GAVE_UP) {
            Ok(()) => {}
            Err(e) if crate::orchestration::is_transport_failure(&e) => return Err(e.into()),
            Err(_) => {}
        }
        let tr = transcript(api, &thread)?;
        self.finish(&tr);
        Ok(())
    }

    fn finish(&mut self, tr: &Transcript) {
        let submission = tr
            .messages
            .iter()
            .rev()
            .find(|m| m.kind == MessageKind::Submission);
        match submission {
            Some(s) if protocol::is_give_up(&s.body) => {
                self.run.outcome = Some(RunOutcome::GaveUp);
                self.run.answer = Some(s.body.clone());
            }
            Some(s) => {
                self.run.outcome = Some(RunOutcome::Submitted);
                self.run.answer = Some(s.body.clone());
            }
            None => {
                self.run.outcome = Some(RunOutcome::Aborted);
                self.failure.get_or_insert_with(|| {
                    OrchError::aborted(format!(
                        "thread closed without a submission: {}",
                        tr.header.summary.clone().unwrap_or_default()
                    ))
                });
            }
        }
        self.phase = Phase::Done;
    }
}

/// Reminders go out halfway to the timeout.
fn reminder_after(timeout: u64) -> u64 {
    (timeout / 2).max(1)
}

impl RoleAgent for Planner {
    fn id(&self) -> &AgentId {
        &self.id
    }

    fn activate(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        _delivered: &[Message],
    ) -> Result<(), OrchError> {
        if matches!(self.phase, Phase::Done) {
            return Ok(());
        }
        if matches!(self.phase, Phase::Init) {
            return self.start(api, now);
        }
        let thread = self.thread_id();
        let tr = match api.get_transcript(&thread) {
            Ok(t) => t,
            Err(e) => return self.fail(e.into()),
        };
        let fresh: Vec<Message> = tr
            .messages
            .iter()
            .filter(|m| m.seq > self.seen)
            .cloned()
            .collect();
        for m in &fresh {
            self.seen = m.seq;
            if let Err(e) = self.observe(api, now, m, &tr) {
                return self.fail(e);
            }
        }
        if tr.is_closed() {
            self.finish(&tr);
            return Ok(());
        }
        for _ in 0..8 {
            match self.advance(api, now, &tr) {
                Ok(true) if !matches!(self.phase, Phase::Done) => continue,
                Ok(_) => break,
                Err(e) => return self.fail(e),
            }
        }
        Ok(())
    }

    fn next_deadline(&self) -> Option<u64> {
        let timeout = self.limits_timeout();
        match &self.phase {
            Phase::Init => Some(0),
            Phase::Done => None,
            Phase::Working => self
                .steps
                .values()
                .filter_map(|t| match t.status {
                    StepStatus::Pending if !t.reminded => {
                        Some(t.assigned_at + reminder_after(timeout))
                    }
                    StepStatus::Pending => Some(t.assigned_at + timeout),
                    StepStatus::Awaiting { since, .. } => Some(since + timeout),
                    _ => None,
                })
                .min(),
            Phase::Discussion { deadline, .. }
            | Phase::AwaitCandidate { deadline }
            | Phase::AwaitSubmission { deadline } => Some(*deadline),
            Phase::Voting { deadline, .. } => Some(
                self.own_vote
                    .map_or(*deadline, |(due, _, _)| due.min(*deadline)),
            ),
        }
    }

    fn observes(&self) -> bool {
        true
    }

    fn is_done(&self) -> bool {
        matches!(self.phase, Phase::Done)
    }

    fn as_planner(&self) -> Option<&Planner> {
        Some(self)
    }
}
