use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::model::{encode_transcript, MessageKind, Transcript};
use crate::orchestration::audit::audit_transcript;
use crate::orchestration::protocol::is_give_up;
use crate::server::persist::thread_path;

use super::scenario::{Expectation, Scenario};
use super::sim::Simulation;
use super::{HarnessError, HarnessErrorCode};

/// What a scenario run produced and how it compares with the expectation.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub mode: &'static str,
    /// `submitted`, `gave_up` or `aborted`.
    pub outcome: String,
    pub answer: Option<String>,
    pub message_count: u64,
    pub plan_versions: u32,
    pub rounds_used: u32,
    /// Last processed tick (logical mode) or elapsed milliseconds.
    pub ticks: u64,
    pub thread: Option<String>,
    pub transcript_path: Option<PathBuf>,
    /// SHA-256 of the canonical message encodings, hex.
    pub transcript_sha256: String,
    pub pass: bool,
    pub violations: Vec<String>,
    #[serde(skip)]
    pub transcript: Option<Transcript>,
}

impl RunReport {
    pub(crate) fn from_transcript(
        s: &Scenario,
        mode: &'static str,
        tr: Option<Transcript>,
        ticks: u64,
        rounds_used: u32,
    ) -> Self {
        let messages = tr
            .as_ref()
            .map(|t| t.messages.as_slice())
            .unwrap_or_default();
        let submission = messages
            .iter()
            .rev()
            .find(|m| m.kind == MessageKind::Submission);
        let closed = tr.as_ref().is_some_and(Transcript::is_closed);
        let outcome = match submission {
            Some(m) if closed && is_give_up(&m.body) => "gave_up",
            Some(_) if closed => "submitted",
            _ => "aborted",
        };
        let plan_versions = tr
            .as_ref()
            .map(|t| {
                messages
                    .iter()
                    .filter(|m| m.kind == MessageKind::Plan && m.sender == t.header.creator)
                    .count() as u32
            })
            .unwrap_or(0);
        Self {
            scenario: s.name.clone(),
            mode,
            outcome: outcome.to_owned(),
            answer: submission.map(|m| m.body.clone()),
            message_count: messages.len() as u64,
            plan_versions,
            rounds_used,
            ticks,
            thread: tr.as_ref().map(|t| t.header.thread.to_string()),
            transcript_path: None,
            transcript_sha256: hex::encode(Sha256::digest(encode_transcript(messages))),
            pass: false,
            violations: Vec::new(),
            transcript: tr,
        }
    }
}

/// Every way `report` misses `expect`, each naming the field at fault.
pub fn assert_outcome(report: &RunReport, expect: &Expectation) -> Vec<String> {
    let mut v = Vec::new();
    if report.outcome != expect.outcome.as_str() {
        v.push(format!(
            "outcome: expected {}, got {}",
            expect.outcome.as_str(),
            report.outcome
        ));
    }
    if let Some(a) = &expect.answer {
        if report.answer.as_deref() != Some(a.as_str()) {
            v.push(format!("answer: expected {a:?}, got {:?}", report.answer));
        }
    }
    if let Some(p) = &expect.answer_prefix {
        if !report
            .answer
            .as_deref()
            .is_some_and(|a| a.starts_with(p.as_str()))
        {
            v.push(format!(
                "answer_prefix: expected {p:?}, got {:?}",
                report.answer
            ));
        }
    }
    if report.message_count > expect.max_messages {
        v.push(format!(
            "max_messages: {} messages exceed {}",
            report.message_count, expect.max_messages
        ));
    }
    if report.plan_versions > expect.max_plan_versions {
        v.push(format!(
            "max_plan_versions: {} plan versions exceed {}",
            report.plan_versions, expect.max_plan_versions
        ));
    }
    let messages = report
        .transcript
        .as_ref()
        .map(|t| t.messages.as_slice())
        .unwrap_or_default();
    let mut at = 0usize;
    for (i, e) in expect.required_transcript_events.iter().enumerate() {
        let hit = messages[at..].iter().position(|m| {
            m.kind == e.kind
                && e.sender.as_ref().is_none_or(|s| s == &m.sender)
                && e.body_pattern.is_match(&m.body)
        });
        match hit {
            Some(k) => at += k + 1,
            None => {
                let after = at
                    .checked_sub(1)
                    .map(|p| format!(" after #{}", messages[p].seq))
                    .unwrap_or_default();
                v.push(format!(
                    "required_transcript_events[{i}]: no {} matching /{}/{after}",
                    e.kind,
                    e.body_pattern.as_str()
                ));
                break;
            }
        }
    }
    v
}

fn out_dir(out: &Path, s: &Scenario) -> PathBuf {
    let name: String = s
        .name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    out.join(format!("{name}-{}", s.seed))
}

/// Runs `s` under the logical clock. With `out`, the thread is persisted
/// under `out/<name>-<seed>/`, which is recreated on every run.
pub fn run_scenario(s: &Scenario, out: Option<&Path>) -> Result<RunReport, HarnessError> {
    let dir = out.map(|o| out_dir(o, s));
    if let Some(d) = &dir {
        if d.exists() {
            std::fs::remove_dir_all(d).map_err(|e| {
                HarnessError::new(HarnessErrorCode::Io, format!("{}: {e}", d.display()))
            })?;
        }
    }
    let mut sim = Simulation::new(s, dir.as_deref())?;
    let ended = sim.run()?;
    if let Some(e) = sim.failure() {
        return Err(HarnessError::aborted(e));
    }
    sim.server()
        .sync()
        .map_err(|e| HarnessError::new(HarnessErrorCode::Io, e.to_string()))?;
    let mut report = RunReport::from_transcript(
        s,
        "logical",
        sim.transcript(),
        sim.last_tick().unwrap_or(0),
        sim.task_run().rounds_used,
    );
    if let (Some(d), Some(tr)) = (&dir, &report.transcript) {
        report.transcript_path = Some(thread_path(d, &tr.header.thread));
    }
    let mut violations = Vec::new();
    if let Err(hang) = ended {
        violations.push(format!("termination: {hang}"));
    }
    violations.extend(assert_outcome(&report, &s.expect));
    if let Some(tr) = &report.transcript {
        violations.extend(
            audit_transcript(tr, sim.roles(), &s.limits)
                .into_iter()
                .map(|a| format!("invariant {a}")),
        );
    }
    report.pass = violations.is_empty();
    report.violations = violations;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::parse_scenario;
    use crate::model::{AgentId, Message, ThreadHeader, ThreadId, ThreadStatus};

    fn expectation(events: serde_json::Value) -> Expectation {
        let v = serde_json::json!({
            "name": "x", "task": "t",
            "agents": [
                {"id": "planner", "role": "planner"},
                {"id": "critique", "role": "critique"},
                {"id": "answer_finding", "role": "answer_finding"},
                {"id": "web", "role": "worker"}
            ],
            "expect": {"outcome": "submitted", "answer": "2732", "max_messages": 5,
                       "max_plan_versions": 1, "required_transcript_events": events}
        });
        parse_scenario(&v.to_string()).unwrap().expect
    }

    fn report(bodies: &[(MessageKind, &str)], answer: &str) -> RunReport {
        let thread = ThreadId::parse("0123456789abcdef0123456789abcdef").unwrap();
        let messages: Vec<Message> = bodies
            .iter()
            .enumerate()
            .map(|(i, (k, b))| Message {
                seq: i as u64 + 1,
                thread: thread.clone(),
                sender: AgentId::new("planner").unwrap(),
                kind: *k,
                body: (*b).into(),
                mentions: vec![],
                ts_ms: 0,
            })
            .collect();
        RunReport {
            scenario: "x".into(),
            mode: "logical",
            outcome: "submitted".into(),
            answer: Some(answer.into()),
            message_count: messages.len() as u64,
            plan_versions: 1,
            rounds_used: 0,
            ticks: 0,
            thread: None,
            transcript_path: None,
            transcript_sha256: String::new(),
            pass: true,
            violations: vec![],
            transcript: Some(Transcript {
                header: ThreadHeader {
                    thread,
                    creator: AgentId::new("planner").unwrap(),
                    participants: vec![],
                    status: ThreadStatus::Closed,
                    summary: None,
                },
                messages,
            }),
        }
    }

    #[test]
    fn matching_report_passes() {
        let e = expectation(serde_json::json!([
            {"kind": "plan", "body_pattern": "."},
            {"kind": "submission", "body_pattern": "^2732$"}
        ]));
        let r = report(
            &[(MessageKind::Plan, "{}"), (MessageKind::Submission, "2732")],
            "2732",
        );
        assert!(assert_outcome(&r, &e).is_empty());
    }

    #[test]
    fn wrong_answer_is_one_violation_on_answer() {
        let e = expectation(serde_json::json!([]));
        let r = report(&[(MessageKind::Submission, "2731")], "2731");
        let v = assert_outcome(&r, &e);
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("answer:"), "{v:?}");
    }

    #[test]
    fn swapped_events_name_the_first_out_of_order_one() {
        let e = expectation(serde_json::json!([
            {"kind": "result", "body_pattern": "."},
            {"kind": "critique", "body_pattern": "^accept"}
        ]));
        let r = report(
            &[
                (MessageKind::Critique, "accept: x"),
                (MessageKind::Result, "2732"),
            ],
            "2732",
        );
        let v = assert_outcome(&r, &e);
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("required_transcript_events[1]"), "{v:?}");
        assert!(v[0].ends_with("after #2"), "{v:?}");
    }

    #[test]
    fn every_violation_is_listed() {
        let e = expectation(serde_json::json!([{"kind": "vote", "body_pattern": "approve"}]));
        let mut r = report(&[(MessageKind::Chat, "a"); 6], "1");
        r.outcome = "gave_up".into();
        r.plan_versions = 3;
        let v = assert_outcome(&r, &e);
        let fields: Vec<&str> = v.iter().map(|s| s.split(':').next().unwrap()).collect();
        assert_eq!(
            fields,
            [
                "outcome",
                "answer",
                "max_messages",
                "max_plan_versions",
                "required_transcript_events[0]"
            ]
        );
    }
}
