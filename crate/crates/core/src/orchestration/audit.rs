//! Transcript-only checks of the coordination invariants.
//!
//! Every check here reads nothing but a [`Transcript`] and the role
//! assignment, so it applies equally to live runs, harness runs and
//! transcripts reloaded from disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::model::{AgentId, Message, MessageKind, Transcript};

use super::consensus::{collect_votes, decide_consensus, ConsensusPolicy, Vote};
use super::plan::{Plan, MAX_PLAN_STEPS};
use super::protocol::{self, VerdictKind};
use super::roles::MAX_CONTRIBUTIONS_PER_VERSION;
use super::run::RunLimits;
use super::RoleAssignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Invariant {
    SubmissionGating,
    CritiqueCoverage,
    PlanMonotonicity,
    ConsensusPurity,
    BypassSoundness,
    MessageBound,
}

impl Invariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Invariant::SubmissionGating => "submission_gating",
            Invariant::CritiqueCoverage => "critique_coverage",
            Invariant::PlanMonotonicity => "plan_monotonicity",
            Invariant::ConsensusPurity => "consensus_purity",
            Invariant::BypassSoundness => "bypass_soundness",
            Invariant::MessageBound => "message_bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditViolation {
    pub invariant: Invariant,
    /// The offending message, when there is one.
    pub seq: Option<u64>,
    pub detail: String,
}

impl fmt::Display for AuditViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(s) => write!(f, "{} at #{s}: {}", self.invariant.as_str(), self.detail),
            None => write!(f, "{}: {}", self.invariant.as_str(), self.detail),
        }
    }
}

/// Upper bound on the messages a run may post. Each plan version admits a
/// bounded amount of planner bookkeeping, worker output, verdicts, capped
/// contributions and one vote round; the final give-up path adds a
/// constant. `max_steps` caps the steps of any single plan.
pub fn message_bound(limits: &RunLimits, roles: &RoleAssignment, max_steps: usize) -> u64 {
    let versions = u64::from(limits.max_rounds) + 1;
    let w = roles.workers.len() as u64;
    let a = roles.all().len() as u64;
    let s = max_steps.min(MAX_PLAN_STEPS) as u64;
    let planner = 1 + 3 * w + s + 4; // plan, directives/cancels/bypass, reminders, prompt/request/note/vote
    let work = 3 * s; // results, late results, verdicts
    let talk = MAX_CONTRIBUTIONS_PER_VERSION as u64 * (a - 1) + (a - 2);
    let finder = 4; // rationale, candidate, refusal, no-validated note
    versions * (planner + work + talk + finder) + 4
}

/// Runs every check and returns all violations, in invariant order.
pub fn audit_transcript(
    tr: &Transcript,
    roles: &RoleAssignment,
    limits: &RunLimits,
) -> Vec<AuditViolation> {
    let mut out = Vec::new();
    submission_gating(tr, roles, limits.consensus_policy, &mut out);
    critique_coverage(&tr.messages, roles, &mut out);
    plan_monotonicity(&tr.messages, roles, limits, &mut out);
    consensus_purity(&tr.messages, roles, limits.consensus_policy, &mut out);
    bypass_soundness(&tr.messages, roles, &mut out);
    let steps = plans(&tr.messages, &roles.planner)
        .iter()
        .map(|(_, p)| p.steps.len())
        .max()
        .unwrap_or(1);
    let bound = message_bound(limits, roles, steps);
    if tr.messages.len() as u64 > bound {
        out.push(AuditViolation {
            invariant: Invariant::MessageBound,
            seq: None,
            detail: format!("{} messages exceed the bound {bound}", tr.messages.len()),
        });
    }
    out
}

fn plans(messages: &[Message], planner: &AgentId) -> Vec<(u64, Plan)> {
    messages
        .iter()
        .filter(|m| m.kind == MessageKind::Plan && &m.sender == planner)
        .filter_map(|m| Plan::parse(&m.body).ok().map(|p| (m.seq, p)))
        .collect()
}

fn push(out: &mut Vec<AuditViolation>, invariant: Invariant, seq: Option<u64>, detail: String) {
    out.push(AuditViolation {
        invariant,
        seq,
        detail,
    });
}

/// A non-give-up submission must repeat a candidate whose accepted
/// consensus note is reproduced by the votes in the transcript.
fn submission_gating(
    tr: &Transcript,
    roles: &RoleAssignment,
    policy: ConsensusPolicy,
    out: &mut Vec<AuditViolation>,
) {
    let inv = Invariant::SubmissionGating;
    let subs: Vec<&Message> = tr
        .messages
        .iter()
        .filter(|m| m.kind == MessageKind::Submission)
        .collect();
    if subs.len() > 1 {
        push(
            out,
            inv,
            Some(subs[1].seq),
            format!("{} submissions", subs.len()),
        );
    }
    let Some(sub) = subs.first() else { return };
    // Only the server's closing note may follow.
    if let Some(after) = tr
        .messages
        .iter()
        .find(|m| m.seq > sub.seq && m.kind != MessageKind::System)
    {
        push(
            out,
            inv,
            Some(after.seq),
            "message after the submission".into(),
        );
    }
    if protocol::is_give_up(&sub.body) {
        return;
    }
    let gated = tr.messages.iter().filter(|n| n.seq < sub.seq).any(|note| {
        if note.kind != MessageKind::Progress || note.sender != roles.planner {
            return false;
        }
        let Some(p) = protocol::parse_consensus_note(&note.body) else {
            return false;
        };
        let Some(c) = tr.messages.iter().find(|c| c.seq == p.candidate_seq) else {
            return false;
        };
        if !p.accepted || c.kind != MessageKind::Candidate || c.body != sub.body {
            return false;
        }
        let votes: Vec<Vote> = collect_votes(&tr.messages, c.seq, &p.polled, Some(note.seq))
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        decide_consensus(&votes, p.polled.len(), policy).accepted()
    });
    if !gated {
        push(
            out,
            inv,
            Some(sub.seq),
            "submission has no candidate with an accepted vote set".into(),
        );
    }
}

/// At most one verdict per result; every result a compile request lists
/// was accepted before the request.
fn critique_coverage(messages: &[Message], roles: &RoleAssignment, out: &mut Vec<AuditViolation>) {
    let inv = Invariant::CritiqueCoverage;
    let results: BTreeSet<u64> = messages
        .iter()
        .filter(|m| m.kind == MessageKind::Result)
        .map(|m| m.seq)
        .collect();
    let mut verdicts: BTreeMap<u64, (u64, VerdictKind)> = BTreeMap::new();
    for m in messages
        .iter()
        .filter(|m| m.kind == MessageKind::Critique && m.sender == roles.critique)
    {
        let Some(v) = protocol::parse_verdict(&m.body) else {
            continue;
        };
        let Some(rs) = v.result_seq else { continue };
        if !results.contains(&rs) || rs > m.seq {
            push(
                out,
                inv,
                Some(m.seq),
                format!("verdict names #{rs}, which is no earlier result"),
            );
            continue;
        }
        if let std::collections::btree_map::Entry::Vacant(e) = verdicts.entry(rs) {
            e.insert((m.seq, v.kind));
        } else {
            push(
                out,
                inv,
                Some(m.seq),
                format!("second verdict on result #{rs}"),
            );
        }
    }
    for m in messages.iter().filter(|m| m.sender == roles.planner) {
        let Some(listed) = protocol::parse_compile_request(&m.body) else {
            continue;
        };
        for rs in listed {
            match verdicts.get(&rs) {
                Some((at, VerdictKind::Accept)) if *at < m.seq => {}
                _ => push(
                    out,
                    inv,
                    Some(m.seq),
                    format!("compile request lists #{rs} without a prior accept"),
                ),
            }
        }
    }
}

/// Planner plans start at version 0, rise by one each time, and number at
/// most `max_rounds + 1`.
fn plan_monotonicity(
    messages: &[Message],
    roles: &RoleAssignment,
    limits: &RunLimits,
    out: &mut Vec<AuditViolation>,
) {
    let inv = Invariant::PlanMonotonicity;
    let ps = plans(messages, &roles.planner);
    for (i, (seq, p)) in ps.iter().enumerate() {
        if p.version != i as u32 {
            push(
                out,
                inv,
                Some(*seq),
                format!("plan v{} at position {i}", p.version),
            );
        }
    }
    if ps.len() as u64 > u64::from(limits.max_rounds) + 1 {
        push(
            out,
            inv,
            None,
            format!(
                "{} plan versions with max_rounds {}",
                ps.len(),
                limits.max_rounds
            ),
        );
    }
}

/// Each consensus note matches the decision recomputed from the votes cast
/// between its candidate and the note.
fn consensus_purity(
    messages: &[Message],
    roles: &RoleAssignment,
    policy: ConsensusPolicy,
    out: &mut Vec<AuditViolation>,
) {
    let inv = Invariant::ConsensusPurity;
    for note in messages
        .iter()
        .filter(|m| m.kind == MessageKind::Progress && m.sender == roles.planner)
    {
        let Some(p) = protocol::parse_consensus_note(&note.body) else {
            continue;
        };
        let ok = messages.iter().any(|c| {
            c.seq == p.candidate_seq && c.kind == MessageKind::Candidate && c.seq < note.seq
        });
        if !ok {
            push(
                out,
                inv,
                Some(note.seq),
                format!(
                    "note names #{}, which is no earlier candidate",
                    p.candidate_seq
                ),
            );
            continue;
        }
        let votes: Vec<Vote> = collect_votes(messages, p.candidate_seq, &p.polled, Some(note.seq))
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let d = decide_consensus(&votes, p.polled.len(), policy);
        if d.accepted() != p.accepted {
            push(
                out,
                inv,
                Some(note.seq),
                format!(
                    "recorded {} but the votes give {}",
                    if p.accepted { "accepted" } else { "rejected" },
                    if d.accepted() { "accepted" } else { "rejected" }
                ),
            );
        }
    }
}

/// No plan after a bypass note allocates anything to the bypassed worker.
fn bypass_soundness(messages: &[Message], roles: &RoleAssignment, out: &mut Vec<AuditViolation>) {
    let inv = Invariant::BypassSoundness;
    let mut bypassed: BTreeSet<AgentId> = BTreeSet::new();
    for m in messages.iter().filter(|m| m.sender == roles.planner) {
        match m.kind {
            MessageKind::Progress => {
                if let Some(w) = m
                    .body
                    .strip_prefix("bypassing ")
                    .and_then(|r| r.split_once(':'))
                    .and_then(|(w, _)| AgentId::new(w).ok())
                {
                    bypassed.insert(w);
                }
            }
            MessageKind::Plan => {
                let Ok(p) = Plan::parse(&m.body) else {
                    continue;
                };
                for w in p.workers().intersection(&bypassed) {
                    push(
                        out,
                        inv,
                        Some(m.seq),
                        format!("plan v{} allocates to bypassed {w}", p.version),
                    );
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ThreadHeader, ThreadId, ThreadStatus};
    use crate::orchestration::consensus::ConsensusDecision;

    fn id(s: &str) -> AgentId {
        AgentId::new(s).unwrap()
    }

    fn roles() -> RoleAssignment {
        RoleAssignment {
            planner: id("planner"),
            critique: id("critique"),
            answer_finding: id("answer_finding"),
            workers: [id("web"), id("reasoning_coding")].into(),
        }
    }

    struct Log(Vec<Message>);

    impl Log {
        fn add(&mut self, sender: &str, kind: MessageKind, body: &str) -> u64 {
            let seq = self.0.len() as u64 + 1;
            self.0.push(Message {
                seq,
                thread: ThreadId::parse("00000000000000000000000000000001").unwrap(),
                sender: id(sender),
                kind,
                body: body.into(),
                mentions: vec![],
                ts_ms: seq,
            });
            seq
        }

        fn transcript(self) -> Transcript {
            Transcript {
                header: ThreadHeader {
                    thread: ThreadId::parse("00000000000000000000000000000001").unwrap(),
                    creator: id("planner"),
                    participants: roles().all().into_iter().collect(),
                    status: ThreadStatus::Closed,
                    summary: None,
                },
                messages: self.0,
            }
        }
    }

    fn plan_body(version: u32, worker: &str) -> String {
        Plan {
            version,
            goal: "g".into(),
            steps: vec![crate::orchestration::Step {
                id: "s1".into(),
                description: "d".into(),
            }],
            allocation: [(id(worker), vec!["s1".into()])].into(),
        }
        .encode()
    }

    fn polled() -> BTreeSet<AgentId> {
        ["planner", "critique", "web"].into_iter().map(id).collect()
    }

    fn note(accepted: bool, cand: u64, approvals: usize, rejections: usize) -> String {
        let d = ConsensusDecision {
            outcome: if accepted {
                crate::orchestration::ConsensusOutcome::Accepted
            } else {
                crate::orchestration::ConsensusOutcome::Rejected
            },
            approvals,
            rejections,
            polled: 3,
            quorum: 2,
        };
        protocol::consensus_note(None, cand, &polled(), &d)
    }

    fn happy() -> Log {
        let mut l = Log(vec![]);
        l.add("planner", MessageKind::Plan, &plan_body(0, "web"));
        let r = l.add("web", MessageKind::Result, "2732");
        l.add(
            "critique",
            MessageKind::Critique,
            &protocol::verdict(VerdictKind::Accept, r, "ok"),
        );
        l.add(
            "planner",
            MessageKind::Chat,
            &protocol::compile_request(&id("answer_finding"), 0, &[r]),
        );
        let c = l.add("answer_finding", MessageKind::Candidate, "2732");
        l.add("planner", MessageKind::Vote, "approve");
        l.add("critique", MessageKind::Vote, "approve");
        l.add("planner", MessageKind::Progress, &note(true, c, 2, 0));
        l.add("answer_finding", MessageKind::Submission, "2732");
        l
    }

    #[test]
    fn clean_run_has_no_violations() {
        let v = audit_transcript(&happy().transcript(), &roles(), &RunLimits::logical());
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn ungated_submission_is_flagged() {
        let mut l = happy();
        l.0.retain(|m| m.kind != MessageKind::Vote || m.sender.as_str() != "critique");
        for (i, m) in l.0.iter_mut().enumerate() {
            m.seq = i as u64 + 1;
        }
        // The note still claims acceptance on a single approve.
        let v = audit_transcript(&l.transcript(), &roles(), &RunLimits::logical());
        let kinds: BTreeSet<Invariant> = v.iter().map(|x| x.invariant).collect();
        assert!(kinds.contains(&Invariant::SubmissionGating), "{v:?}");
        assert!(kinds.contains(&Invariant::ConsensusPurity), "{v:?}");
    }

    #[test]
    fn give_up_needs_no_votes() {
        let mut l = Log(vec![]);
        l.add("planner", MessageKind::Plan, &plan_body(0, "web"));
        l.add("answer_finding", MessageKind::Candidate, "give up: no data");
        l.add(
            "answer_finding",
            MessageKind::Submission,
            "give up: no data",
        );
        assert!(audit_transcript(&l.transcript(), &roles(), &RunLimits::logical()).is_empty());
    }

    #[test]
    fn double_verdict_and_unaccepted_listing() {
        let mut l = Log(vec![]);
        l.add("planner", MessageKind::Plan, &plan_body(0, "web"));
        let r = l.add("web", MessageKind::Result, "x");
        l.add(
            "critique",
            MessageKind::Critique,
            &protocol::verdict(VerdictKind::Uncertain, r, "?"),
        );
        l.add(
            "critique",
            MessageKind::Critique,
            &protocol::verdict(VerdictKind::Accept, r, "ok"),
        );
        l.add(
            "planner",
            MessageKind::Chat,
            &protocol::compile_request(&id("answer_finding"), 0, &[r]),
        );
        let v = audit_transcript(&l.transcript(), &roles(), &RunLimits::logical());
        assert_eq!(
            v.iter()
                .filter(|x| x.invariant == Invariant::CritiqueCoverage)
                .count(),
            2,
            "{v:?}"
        );
    }

    #[test]
    fn plan_versions_and_bypass() {
        let mut l = Log(vec![]);
        l.add("planner", MessageKind::Plan, &plan_body(0, "web"));
        l.add(
            "planner",
            MessageKind::Progress,
            &protocol::bypass_note(&id("web"), &["s1".into()], 20),
        );
        l.add("planner", MessageKind::Plan, &plan_body(2, "web"));
        let v = audit_transcript(&l.transcript(), &roles(), &RunLimits::logical());
        let kinds: Vec<Invariant> = v.iter().map(|x| x.invariant).collect();
        assert_eq!(
            kinds,
            vec![Invariant::PlanMonotonicity, Invariant::BypassSoundness]
        );

        let limits = RunLimits {
            max_rounds: 1,
            ..RunLimits::logical()
        };
        let mut l = Log(vec![]);
        for v in 0..3 {
            l.add(
                "planner",
                MessageKind::Plan,
                &plan_body(v, "reasoning_coding"),
            );
        }
        let v = audit_transcript(&l.transcript(), &roles(), &limits);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].invariant, Invariant::PlanMonotonicity);
    }

    #[test]
    fn bound_grows_with_rounds() {
        let r = roles();
        let small = message_bound(
            &RunLimits {
                max_rounds: 1,
                ..RunLimits::logical()
            },
            &r,
            1,
        );
        let big = message_bound(&RunLimits::logical(), &r, 1);
        assert!(small < big);
        assert!(happy().0.len() as u64 <= small);
    }
}
