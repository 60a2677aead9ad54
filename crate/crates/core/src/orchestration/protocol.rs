//! Body formats of the coordination messages, with their parsers.
//!
//! Every role reads these from the thread; none of them depend on shared
//! memory between roles.

use std::collections::BTreeSet;

use crate::model::{AgentId, Message, MessageKind};

use super::consensus::{ConsensusDecision, Vote};
use super::plan::Step;

/// Prefix of every give-up answer.
pub const GIVE_UP_PREFIX: &str = "give up: ";
pub const SUMMARY_SUBMITTED: &str = "answer submitted: ";
pub const SUMMARY_GAVE_UP: &str = "gave up";

pub fn is_give_up(answer: &str) -> bool {
    answer.starts_with(GIVE_UP_PREFIX)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `@w plan vN assigns:` followed by one `id: description` line per step.
pub fn directive(worker: &AgentId, version: u32, steps: &[&Step]) -> String {
    let mut body = format!("@{worker} plan v{version} assigns:");
    for s in steps {
        body.push('\n');
        body.push_str(&s.id);
        body.push_str(": ");
        body.push_str(&one_line(&s.description));
    }
    body
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Directive {
    pub worker: AgentId,
    pub version: u32,
    pub steps: Vec<Step>,
}

pub fn parse_directive(body: &str) -> Option<Directive> {
    let mut lines = body.lines();
    let head = lines.next()?;
    let rest = head.strip_prefix('@')?;
    let (worker, rest) = rest.split_once(' ')?;
    let version = rest.strip_prefix("plan v")?.strip_suffix(" assigns:")?;
    let steps = lines
        .map(|l| {
            l.split_once(": ")
                .map(|(id, d)| Step::new(id, d))
                .or_else(|| l.strip_suffix(':').map(|id| Step::new(id, "")))
        })
        .collect::<Option<Vec<_>>>()?;
    if steps.is_empty() {
        return None;
    }
    Some(Directive {
        worker: AgentId::new(worker).ok()?,
        version: version.parse().ok()?,
        steps,
    })
}

pub fn reminder(worker: &AgentId, step_ids: &[String], version: u32, waited: u64) -> String {
    format!(
        "@{worker} reminder: step {} of plan v{version} has had no result for {waited} time units",
        step_ids.join(", ")
    )
}

/// Names the bypassed agent without an `@`, so it is not notified.
pub fn bypass_note(worker: &AgentId, step_ids: &[String], timeout: u64) -> String {
    format!(
        "bypassing {worker}: no result for step {} within {timeout} time units",
        step_ids.join(", ")
    )
}

pub fn cancellation(version: u32, worker: &AgentId, step_ids: &[String]) -> String {
    format!(
        "plan v{version} cancels {worker} allocation: {}",
        step_ids.join(", ")
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictKind {
    Accept,
    Uncertain,
}

impl VerdictKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictKind::Accept => "accept",
            VerdictKind::Uncertain => "uncertain",
        }
    }
}

/// `accept: result #N: rationale`.
pub fn verdict(kind: VerdictKind, result_seq: u64, rationale: &str) -> String {
    format!(
        "{}: result #{result_seq}: {}",
        kind.as_str(),
        one_line(rationale)
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedVerdict {
    pub kind: VerdictKind,
    pub result_seq: Option<u64>,
    pub rationale: String,
}

/// A verdict without a `result #N:` reference still parses; it then
/// refers to nothing.
pub fn parse_verdict(body: &str) -> Option<ParsedVerdict> {
    let (kind, rest) = if let Some(r) = body.strip_prefix("accept:") {
        (VerdictKind::Accept, r)
    } else {
        let r = body.strip_prefix("uncertain:")?;
        (VerdictKind::Uncertain, r)
    };
    let rest = rest.trim_start();
    let (result_seq, rationale) = match rest.strip_prefix("result #") {
        Some(r) => {
            let digits: String = r.chars().take_while(char::is_ascii_digit).collect();
            let after = &r[digits.len()..];
            match (digits.parse().ok(), after.strip_prefix(':')) {
                (Some(n), Some(tail)) => (Some(n), tail.trim_start()),
                _ => (None, rest),
            }
        }
        None => (None, rest),
    };
    Some(ParsedVerdict {
        kind,
        result_seq,
        rationale: rationale.to_owned(),
    })
}

pub fn discussion_prompt(
    critique: &AgentId,
    answer_finding: &AgentId,
    result_seq: u64,
    step_id: &str,
    rationale: &str,
) -> String {
    format!(
        "@{critique} @{answer_finding} result #{result_seq} for step {step_id} is uncertain ({}). Please advise how to proceed.",
        one_line(rationale)
    )
}

pub fn compile_request(answer_finding: &AgentId, version: u32, results: &[u64]) -> String {
    let list: Vec<String> = results.iter().map(|s| format!("#{s}")).collect();
    format!(
        "@{answer_finding} all steps of plan v{version} are accepted (results {}); please compile the answer",
        list.join(", ")
    )
}

/// Result seqs listed in a compile request.
pub fn parse_compile_request(body: &str) -> Option<Vec<u64>> {
    let inner = body.split_once("(results ")?.1.split_once(')')?.0;
    inner
        .split(", ")
        .map(|s| s.strip_prefix('#').and_then(|n| n.parse().ok()))
        .collect()
}

pub fn give_up_instruction(answer_finding: &AgentId, reason: &str) -> String {
    format!("@{answer_finding} {GIVE_UP_PREFIX}{}", one_line(reason))
}

/// The reason carried by a give-up instruction, without the mention.
pub fn parse_give_up_instruction(body: &str) -> Option<&str> {
    let rest = body.strip_prefix('@')?;
    let (_, rest) = rest.split_once(' ')?;
    rest.strip_prefix(GIVE_UP_PREFIX)
}

pub fn consensus_note(
    answer_finding: Option<&AgentId>,
    candidate_seq: u64,
    polled: &BTreeSet<AgentId>,
    decision: &ConsensusDecision,
) -> String {
    let who: Vec<&str> = polled.iter().map(AgentId::as_str).collect();
    let word = if decision.accepted() {
        "accepted"
    } else {
        "rejected"
    };
    let head = answer_finding.map(|f| format!("@{f} ")).unwrap_or_default();
    format!(
        "{head}consensus {word}: candidate #{candidate_seq} polled=[{}] approve={} reject={} quorum={}",
        who.join(","),
        decision.approvals,
        decision.rejections,
        decision.quorum
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedConsensus {
    pub accepted: bool,
    pub candidate_seq: u64,
    pub polled: BTreeSet<AgentId>,
}

pub fn parse_consensus_note(body: &str) -> Option<ParsedConsensus> {
    let at = body.find("consensus ")?;
    let rest = &body[at + "consensus ".len()..];
    let (word, rest) = rest.split_once(": candidate #")?;
    let accepted = match word {
        "accepted" => true,
        "rejected" => false,
        _ => return None,
    };
    let (seq, rest) = rest.split_once(" polled=[")?;
    let (list, _) = rest.split_once(']')?;
    let polled = if list.is_empty() {
        BTreeSet::new()
    } else {
        list.split(',')
            .map(|s| AgentId::new(s).ok())
            .collect::<Option<BTreeSet<_>>>()?
    };
    Some(ParsedConsensus {
        accepted,
        candidate_seq: seq.parse().ok()?,
        polled,
    })
}

pub fn compile_rationale(chosen: u64, considered: &[u64], why: &str) -> String {
    let list: Vec<String> = considered.iter().map(|s| format!("#{s}")).collect();
    format!(
        "compiled from results {}; chose #{chosen}: {}",
        list.join(", "),
        one_line(why)
    )
}

pub fn late_result(step_id: &str, body: &str) -> String {
    format!("late result for step {step_id}: {body}")
}

pub fn submit_refusal(candidate_seq: u64, why: &str) -> String {
    format!("cannot submit candidate #{candidate_seq}: {why}")
}

/// The latest `plan` message sent by `planner`.
pub fn latest_plan<'a>(messages: &'a [Message], planner: &AgentId) -> Option<&'a Message> {
    messages
        .iter()
        .rev()
        .find(|m| m.kind == MessageKind::Plan && &m.sender == planner)
}

pub fn vote_body(v: Vote) -> &'static str {
    v.as_str()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestration::consensus::{decide_consensus, ConsensusPolicy};

    fn a(s: &str) -> AgentId {
        AgentId::new(s).unwrap()
    }

    #[test]
    fn directive_round_trip() {
        let s1 = Step::new("s1", "find the page\nand its history");
        let s2 = Step::new("s2", "count: edits");
        let body = directive(&a("web"), 3, &[&s1, &s2]);
        assert!(body.starts_with("@web plan v3 assigns:\ns1: find the page and its history"));
        let d = parse_directive(&body).unwrap();
        assert_eq!(d.worker, a("web"));
        assert_eq!(d.version, 3);
        assert_eq!(d.steps[1], Step::new("s2", "count: edits"));
        assert!(parse_directive("@web reminder: step s1").is_none());
        assert!(parse_directive("@web plan v1 assigns:").is_none());
    }

    #[test]
    fn verdict_round_trip() {
        let b = verdict(VerdictKind::Uncertain, 12, "error body");
        assert_eq!(b, "uncertain: result #12: error body");
        let p = parse_verdict(&b).unwrap();
        assert_eq!(p.kind, VerdictKind::Uncertain);
        assert_eq!(p.result_seq, Some(12));
        assert_eq!(p.rationale, "error body");
        let loose = parse_verdict("accept: looks right").unwrap();
        assert_eq!(loose.result_seq, None);
        assert!(parse_verdict("approve").is_none());
    }

    #[test]
    fn compile_and_give_up_round_trip() {
        let b = compile_request(&a("answer_finding"), 1, &[5, 9]);
        assert_eq!(parse_compile_request(&b), Some(vec![5, 9]));
        let g = give_up_instruction(
            &a("answer_finding"),
            "The web agent has not provided any data",
        );
        assert_eq!(
            parse_give_up_instruction(&g),
            Some("The web agent has not provided any data")
        );
        assert!(is_give_up(&format!("{GIVE_UP_PREFIX}x")));
    }

    #[test]
    fn consensus_note_round_trip() {
        let polled: BTreeSet<AgentId> = [a("critique"), a("planner"), a("web")].into();
        let d = decide_consensus(
            &[Vote::Approve, Vote::Approve],
            3,
            ConsensusPolicy::default(),
        );
        let body = consensus_note(Some(&a("answer_finding")), 7, &polled, &d);
        assert_eq!(
            body,
            "@answer_finding consensus accepted: candidate #7 polled=[critique,planner,web] approve=2 reject=0 quorum=2"
        );
        let p = parse_consensus_note(&body).unwrap();
        assert!(p.accepted);
        assert_eq!(p.candidate_seq, 7);
        assert_eq!(p.polled, polled);
        let none = consensus_note(None, 2, &BTreeSet::new(), &d);
        assert!(parse_consensus_note(&none).unwrap().polled.is_empty());
    }
}
