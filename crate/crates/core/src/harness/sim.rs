use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::client::{A2aApi, LocalSession};
use crate::model::{AgentId, AgentRegistration, Message, ThreadId, Transcript};
use crate::orchestration::{
    build_role, OrchError, RoleAgent, RoleAssignment, RoleContext, TaskRun,
};
use crate::server::{ClockMode, Server, ServerConfig};

use super::scenario::Scenario;
use super::script::ScriptedReasoner;
use super::HarnessError;

/// Ticks past this point count as a hang.
pub const TICK_CEILING: u64 = 100_000;
/// Activation passes within one tick before the tick is forced to end.
pub const MAX_PASSES_PER_TICK: usize = 64;

/// Every role of a scenario on one in-process server, stepped tick by tick.
///
/// Within a tick, agents act in ascending id order, pass after pass, until
/// a pass posts nothing and delivers nothing. An agent acts in a pass when
/// mentions were delivered to it, one of its deadlines is due, or it
/// observes the thread continuously (the planner).
pub struct Simulation {
    server: Arc<Server>,
    sessions: BTreeMap<AgentId, LocalSession>,
    agents: BTreeMap<AgentId, Box<dyn RoleAgent>>,
    roles: RoleAssignment,
    /// Next tick to process.
    now: u64,
    /// Last processed tick.
    last: Option<u64>,
    /// Messages of the run thread already returned by `step`.
    reported: usize,
}

impl Simulation {
    /// Builds the cast; `persist` receives the JSONL transcripts.
    pub fn new(s: &Scenario, persist: Option<&Path>) -> Result<Self, HarnessError> {
        let config = ServerConfig {
            clock: ClockMode::Injected,
            persistence_dir: persist.map(Path::to_path_buf),
            id_seed: Some(s.seed),
            ..ServerConfig::default()
        };
        let server = Server::new(config).map_err(HarnessError::aborted)?;
        for a in &s.agents {
            server
                .register_agent(AgentRegistration::new(
                    a.id.clone(),
                    a.description_or_role(),
                    a.role,
                ))
                .map_err(HarnessError::aborted)?;
        }
        let roles =
            RoleAssignment::from_registry(&server.list_agents()).map_err(HarnessError::aborted)?;
        let ctx = RoleContext {
            roles: roles.clone(),
            limits: s.limits.clone(),
            task: s.task.clone(),
        };
        let mut sessions = BTreeMap::new();
        let mut agents = BTreeMap::new();
        for a in &s.agents {
            let reasoner = Box::new(ScriptedReasoner::new(a, &s.task, 1));
            let role = build_role(&a.id, ctx.clone(), reasoner)
                .ok_or_else(|| HarnessError::aborted(format!("{} holds no role", a.id)))?;
            sessions.insert(
                a.id.clone(),
                LocalSession::new(server.clone(), a.id.clone()),
            );
            agents.insert(a.id.clone(), role);
        }
        Ok(Self {
            server,
            sessions,
            agents,
            roles,
            now: 0,
            last: None,
            reported: 0,
        })
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }

    pub fn roles(&self) -> &RoleAssignment {
        &self.roles
    }

    /// The next tick `step` would process.
    pub fn now(&self) -> u64 {
        self.now
    }

    /// The last tick that was processed.
    pub fn last_tick(&self) -> Option<u64> {
        self.last
    }

    fn planner(&self) -> &dyn RoleAgent {
        self.agents[&self.roles.planner].as_ref()
    }

    pub fn thread(&self) -> Option<&ThreadId> {
        self.planner().as_planner().and_then(|p| p.thread())
    }

    pub fn task_run(&self) -> TaskRun {
        self.planner()
            .as_planner()
            .expect("planner role")
            .task_run()
    }

    pub fn failure(&self) -> Option<&OrchError> {
        self.planner().as_planner().and_then(|p| p.failure())
    }

    /// The planner saw the run end.
    pub fn is_done(&self) -> bool {
        self.planner().is_done()
    }

    pub fn transcript(&self) -> Option<Transcript> {
        self.thread()
            .and_then(|t| self.server.get_transcript(t).ok())
    }

    /// Earliest deadline of any agent.
    pub fn next_due(&self) -> Option<u64> {
        self.agents.values().filter_map(|a| a.next_deadline()).min()
    }

    fn process_tick(&mut self, t: u64) -> Result<(), HarnessError> {
        self.server.advance_clock_to(t);
        for _ in 0..MAX_PASSES_PER_TICK {
            let before = self.server.message_total();
            let mut delivered_any = false;
            for (id, role) in self.agents.iter_mut() {
                let api = &self.sessions[id];
                let delivered = api
                    .wait_for_mentions(None, Some(0))
                    .map_err(HarnessError::aborted)?;
                let due = role.next_deadline().is_some_and(|d| d <= t);
                if delivered.is_empty() && !due && !role.observes() {
                    continue;
                }
                delivered_any |= !delivered.is_empty();
                role.activate(api, t, &delivered)
                    .map_err(HarnessError::aborted)?;
            }
            if !delivered_any && self.server.message_total() == before {
                return Ok(());
            }
        }
        tracing::warn!(
            tick = t,
            "tick did not settle within {MAX_PASSES_PER_TICK} passes"
        );
        Ok(())
    }

    /// Processes the ticks in `[now, now + n)` at which something is due
    /// and returns the messages posted meanwhile.
    pub fn step(&mut self, n: u64) -> Result<Vec<Message>, HarnessError> {
        let end = self.now.saturating_add(n);
        while self.now < end && !self.is_done() {
            let t = self.now;
            self.process_tick(t)?;
            self.last = Some(t);
            self.now = match self.next_due() {
                Some(d) if !self.is_done() => d.max(t + 1).min(end),
                _ => end,
            };
        }
        let messages = self.transcript().map(|tr| tr.messages).unwrap_or_default();
        let fresh = messages.get(self.reported..).unwrap_or_default().to_vec();
        self.reported = messages.len();
        Ok(fresh)
    }

    /// Steps until the run ends or nothing can happen any more. `Err`
    /// names the hang.
    pub fn run(&mut self) -> Result<Result<(), String>, HarnessError> {
        while !self.is_done() {
            if self.last.is_some() && self.next_due().is_none() {
                return Ok(Err(format!(
                    "hang at tick {}: the thread is open and no agent has pending work",
                    self.last.unwrap_or(0)
                )));
            }
            if self.now > TICK_CEILING {
                return Ok(Err(format!("tick ceiling {TICK_CEILING} reached")));
            }
            self.step(TICK_CEILING + 1 - self.now)?;
        }
        Ok(Ok(()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::parse_scenario;
    use crate::model::MessageKind;

    fn scenario() -> Scenario {
        let v = serde_json::json!({
            "name": "tiny", "task": "say 42", "seed": 3,
            "agents": [
                {"id": "planner", "role": "planner"},
                {"id": "critique", "role": "critique", "rules": [
                    {"trigger": {"mention_pattern": ".*", "kind": "result"},
                     "response": {"kind": "critique", "body_template": "accept: fine"}},
                    {"trigger": {"mention_pattern": ".*", "kind": "candidate"},
                     "response": {"kind": "vote", "body_template": "approve"}}
                ]},
                {"id": "answer_finding", "role": "answer_finding", "rules": [
                    {"trigger": {"mention_pattern": "please compile"},
                     "response": {"kind": "candidate", "body_template": "{{answer}}"}}
                ]},
                {"id": "web", "role": "worker", "rules": [
                    {"trigger": {"mention_pattern": "^s1:"}, "delay_ticks": 5,
                     "response": {"kind": "result", "body_template": "42"}},
                    {"trigger": {"mention_pattern": ".*", "kind": "candidate"},
                     "response": {"kind": "vote", "body_template": "approve"}}
                ]}
            ],
            "expect": {"outcome": "submitted", "answer": "42", "max_messages": 30, "max_plan_versions": 1}
        });
        parse_scenario(&v.to_string()).unwrap()
    }

    #[test]
    fn zero_step_is_empty_and_planner_opens_at_tick_zero() {
        let mut sim = Simulation::new(&scenario(), None).unwrap();
        assert!(sim.step(0).unwrap().is_empty());
        let first = sim.step(1).unwrap();
        assert!(!first.is_empty());
        assert!(first
            .iter()
            .all(|m| m.sender.as_str() == "planner" && m.ts_ms == 0));
        assert_eq!(first[0].kind, MessageKind::Plan);
    }

    #[test]
    fn delay_is_honoured_exactly() {
        let mut sim = Simulation::new(&scenario(), None).unwrap();
        sim.run().unwrap().unwrap();
        let tr = sim.transcript().unwrap();
        let directive = tr
            .messages
            .iter()
            .find(|m| m.body.starts_with("@web plan v0"))
            .unwrap();
        let result = tr
            .messages
            .iter()
            .find(|m| m.kind == MessageKind::Result)
            .unwrap();
        assert_eq!(result.ts_ms - directive.ts_ms, 5);
        assert!(sim.is_done());
        assert_eq!(
            tr.messages
                .iter()
                .filter(|m| m.kind == MessageKind::Submission)
                .count(),
            1
        );
    }
}
