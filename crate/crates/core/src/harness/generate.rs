//! Seeded random scenarios for termination testing.
//!
//! Each scenario draws a plan shape, a behaviour per worker (prompt, slow,
//! silent forever, failing), a critique that accepts or doubts, an
//! answer-finder that may stall, random voters and random limits. The
//! outcome is not predicted; [`termination_violations`] checks only what
//! must hold for every run.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::model::AgentId;
use crate::orchestration::audit::message_bound;
use crate::orchestration::RoleAssignment;

use super::report::RunReport;
use super::scenario::{parse_scenario, Scenario};

const WORKER_POOL: [&str; 3] = ["document_processing", "reasoning_coding", "web"];
pub const MAX_GENERATED_STEPS: usize = 4;

fn rule(pattern: &str, kind: Option<&str>, delay: Value, rkind: &str, body: Value) -> Value {
    let mut trigger = json!({ "mention_pattern": pattern });
    if let Some(k) = kind {
        trigger["kind"] = json!(k);
    }
    json!({
        "trigger": trigger,
        "delay_ticks": delay,
        "response": { "kind": rkind, "body_template": body },
    })
}

fn vote_rule(rng: &mut ChaCha8Rng) -> Option<Value> {
    match rng.gen_range(0..8) {
        0 => None,
        1 => Some(rule(
            ".*",
            Some("candidate"),
            json!(rng.gen_range(0..6)),
            "vote",
            json!("reject"),
        )),
        _ => Some(rule(
            ".*",
            Some("candidate"),
            json!(rng.gen_range(0..6)),
            "vote",
            json!("approve"),
        )),
    }
}

fn default_behaviour(rng: &mut ChaCha8Rng) -> &'static str {
    if rng.gen_bool(0.5) {
        "silent"
    } else {
        "echo_uncertain"
    }
}

fn worker(rng: &mut ChaCha8Rng, id: &str, timeout: u64) -> Value {
    let mut rules = Vec::new();
    match rng.gen_range(0..8) {
        // Prompt: even a full allocation finishes inside the timeout.
        0..=4 => rules.push(rule(
            "^s\\d+:",
            None,
            json!(rng.gen_range(0..timeout / MAX_GENERATED_STEPS as u64)),
            "result",
            json!(format!("{{{{step_id}}}} from {id}")),
        )),
        // Slower than the reminder timeout; results may arrive late.
        5 => rules.push(rule(
            "^s\\d+:",
            None,
            json!(rng.gen_range(timeout..timeout * 3)),
            "result",
            json!("late {{step_id}}"),
        )),
        // Busy forever on one step, prompt on the rest.
        6 => {
            rules.push(rule(
                "^s1:",
                None,
                json!("forever"),
                "result",
                json!("never"),
            ));
            rules.push(rule(
                "^s\\d+:",
                None,
                json!(rng.gen_range(0..timeout)),
                "result",
                json!("ok {{step_id}}"),
            ));
        }
        // No result rule: the default behaviour decides.
        _ => {}
    }
    rules.extend(vote_rule(rng));
    json!({ "id": id, "role": "worker", "rules": rules, "default": default_behaviour(rng) })
}

fn critique(rng: &mut ChaCha8Rng) -> Value {
    let mut rules = Vec::new();
    let delay = json!(rng.gen_range(0..4));
    match rng.gen_range(0..8) {
        0 => {}
        1 => rules.push(rule(
            ".*",
            Some("result"),
            delay,
            "critique",
            json!("uncertain: unsupported"),
        )),
        2 => {
            rules.push(rule(
                "^late",
                Some("result"),
                delay.clone(),
                "critique",
                json!("uncertain: stale"),
            ));
            rules.push(rule(
                ".*",
                Some("result"),
                delay,
                "critique",
                json!("accept: consistent"),
            ));
        }
        _ => rules.push(rule(
            ".*",
            Some("result"),
            delay,
            "critique",
            json!("accept: consistent"),
        )),
    }
    rules.extend(vote_rule(rng));
    json!({ "id": "critique", "role": "critique", "rules": rules, "default": default_behaviour(rng) })
}

fn answer_finding(rng: &mut ChaCha8Rng) -> Value {
    let mut rules = Vec::new();
    match rng.gen_range(0..5) {
        0 => {}
        1 => rules.push(rule(
            ".*",
            Some("chat"),
            json!("forever"),
            "candidate",
            json!("{{answer}}"),
        )),
        _ => rules.push(rule(
            ".*",
            Some("chat"),
            json!(rng.gen_range(0..5)),
            "candidate",
            json!("{{answer}}"),
        )),
    }
    rules.extend(vote_rule(rng));
    json!({ "id": "answer_finding", "role": "answer_finding", "rules": rules, "default": default_behaviour(rng) })
}

fn planner(rng: &mut ChaCha8Rng, workers: &[&str]) -> Value {
    let mut rules = Vec::new();
    if rng.gen_bool(0.75) {
        let n = rng.gen_range(1..=MAX_GENERATED_STEPS);
        let steps: Vec<Value> = (1..=n)
            .map(|i| json!({ "id": format!("s{i}"), "description": format!("part {i} of {{{{task}}}}") }))
            .collect();
        let mut allocation = serde_json::Map::new();
        for i in 1..=n {
            let w = workers[rng.gen_range(0..workers.len())];
            allocation
                .entry(w)
                .or_insert_with(|| json!([]))
                .as_array_mut()
                .expect("array")
                .push(json!(format!("s{i}")));
        }
        let plan = json!({ "goal": "{{task}}", "steps": steps, "allocation": allocation });
        rules.push(rule(".*", Some("system"), json!(0), "plan", plan));
    }
    json!({ "id": "planner", "role": "planner", "rules": rules })
}

/// The scenario for `seed`. Same seed, same scenario.
pub fn random_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = WORKER_POOL.to_vec();
    pool.shuffle(&mut rng);
    pool.truncate(rng.gen_range(1..=WORKER_POOL.len()));
    pool.sort_unstable();

    let timeout = rng.gen_range(5..=30);
    let mode = if rng.gen_bool(0.5) {
        "unanimous_quorum"
    } else {
        "majority"
    };
    let quorum = ["1/3", "1/2", "2/3", "1/1"][rng.gen_range(0..4)];
    let limits = json!({
        "max_rounds": rng.gen_range(1..=4),
        "mention_response_timeout": timeout,
        "vote_collection_timeout": rng.gen_range(3..=15),
        "consensus_policy": { "mode": mode, "quorum_fraction": quorum },
    });
    let mut agents = vec![
        planner(&mut rng, &pool),
        critique(&mut rng),
        answer_finding(&mut rng),
    ];
    for w in &pool {
        agents.push(worker(&mut rng, w, timeout));
    }
    let v = json!({
        "name": format!("random-{seed}"),
        "task": format!("random task {seed}"),
        "seed": seed,
        "limits": limits,
        "agents": agents,
        // Outcome is not predicted; see `termination_violations`.
        "expect": { "outcome": "submitted", "max_messages": 1, "max_plan_versions": 1 },
    });
    let mut s = parse_scenario(&v.to_string()).expect("generated scenarios are valid");
    s.expect.max_plan_versions = s.limits.max_rounds + 1;
    s.expect.max_messages = message_bound(&s.limits, &roles_of(&s), MAX_GENERATED_STEPS);
    s
}

fn roles_of(s: &Scenario) -> RoleAssignment {
    let by = |r| {
        s.agents
            .iter()
            .find(|a| a.role == r)
            .map(|a| a.id.clone())
            .expect("role present")
    };
    RoleAssignment {
        planner: by(crate::model::Role::Planner),
        critique: by(crate::model::Role::Critique),
        answer_finding: by(crate::model::Role::AnswerFinding),
        workers: s
            .agents
            .iter()
            .filter(|a| a.role == crate::model::Role::Worker)
            .map(|a| a.id.clone())
            .collect::<std::collections::BTreeSet<AgentId>>(),
    }
}

/// What every run must satisfy regardless of its scripts: it ended in a
/// submission or a give-up, within the message and plan-version bounds,
/// without a hang and with a clean transcript audit.
pub fn termination_violations(report: &RunReport, s: &Scenario) -> Vec<String> {
    let mut v: Vec<String> = report
        .violations
        .iter()
        .filter(|m| m.starts_with("termination") || m.starts_with("invariant"))
        .cloned()
        .collect();
    if !matches!(report.outcome.as_str(), "submitted" | "gave_up") {
        v.push(format!("outcome: run ended {}", report.outcome));
    }
    if report.message_count > s.expect.max_messages {
        v.push(format!(
            "max_messages: {} exceed the bound {}",
            report.message_count, s.expect.max_messages
        ));
    }
    if report.plan_versions > s.expect.max_plan_versions {
        v.push(format!(
            "max_plan_versions: {} exceed {}",
            report.plan_versions, s.expect.max_plan_versions
        ));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scenario() {
        assert_eq!(random_scenario(7), random_scenario(7));
        assert_ne!(random_scenario(7), random_scenario(8));
    }

    #[test]
    fn generated_scenarios_validate() {
        for seed in 0..50 {
            random_scenario(seed).validate().unwrap();
        }
    }
}
