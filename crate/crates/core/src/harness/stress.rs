use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::client::{A2aApi, Session};
use crate::model::AgentId;
use crate::orchestration::audit::audit_transcript;
use crate::orchestration::{run_task, LiveOptions, Reasoner, RoleAssignment};
use crate::server::tcp::TcpServer;
use crate::server::wire::RegisterInfo;
use crate::server::{Server, ServerConfig};

use super::report::RunReport;
use super::scenario::Scenario;
use super::script::ScriptedReasoner;
use super::HarnessError;

#[derive(Debug, Clone)]
pub struct StressOptions {
    /// Wall milliseconds per scripted tick.
    pub tick_ms: u64,
    pub max_duration: Duration,
}

impl Default for StressOptions {
    fn default() -> Self {
        Self {
            tick_ms: 5,
            max_duration: Duration::from_secs(60),
        }
    }
}

/// Runs `s` over loopback TCP with one thread per role and a wall clock.
///
/// Interleavings vary from run to run, so only properties that hold under
/// any interleaving are checked: sequence numbers are gap-free, no mention
/// cursor moved backwards, the run ended in a submission or a give-up, and
/// the transcript audit is clean.
pub fn run_stress(s: &Scenario, opts: &StressOptions) -> Result<RunReport, HarnessError> {
    let server = Server::new(ServerConfig {
        auto_register: false,
        ..ServerConfig::default()
    })
    .map_err(HarnessError::aborted)?;
    let mut tcp = TcpServer::bind(server.clone(), "127.0.0.1:0").map_err(HarnessError::aborted)?;
    let endpoint = tcp.local_addr().to_string();
    let unit = opts.tick_ms.max(1);

    let mut sessions: Vec<Arc<dyn A2aApi>> = Vec::new();
    let mut reasoners: BTreeMap<AgentId, Box<dyn Reasoner>> = BTreeMap::new();
    let mut raw = Vec::new();
    for a in &s.agents {
        let info = RegisterInfo {
            description: a.description_or_role(),
            role: a.role,
        };
        let session =
            Session::connect(&endpoint, &a.id, Some(info)).map_err(HarnessError::aborted)?;
        raw.push(session.clone());
        sessions.push(Arc::new(session));
        reasoners.insert(
            a.id.clone(),
            Box::new(ScriptedReasoner::new(a, &s.task, unit)),
        );
    }
    let roles =
        RoleAssignment::from_registry(&server.list_agents()).map_err(HarnessError::aborted)?;
    let started = Instant::now();
    let run = run_task(
        &s.task,
        sessions,
        reasoners,
        s.limits.scaled(unit),
        LiveOptions {
            poll_ms: unit.clamp(1, 25),
            max_duration: opts.max_duration,
        },
    );
    for session in &raw {
        session.close();
    }
    tcp.shutdown();
    let run = run.map_err(HarnessError::aborted)?;

    let tr = run
        .thread
        .as_ref()
        .and_then(|t| server.get_transcript(t).ok());
    let elapsed = started.elapsed().as_millis() as u64;
    let mut report = RunReport::from_transcript(s, "wall", tr, elapsed, run.rounds_used);
    let mut violations = Vec::new();
    if let Some(tr) = &report.transcript {
        if let Some((i, m)) = tr
            .messages
            .iter()
            .enumerate()
            .find(|(i, m)| m.seq != *i as u64 + 1)
        {
            violations.push(format!("sequence gap: message {i} has seq {}", m.seq));
        }
        violations.extend(
            audit_transcript(tr, &roles, &s.limits.scaled(unit))
                .into_iter()
                .map(|a| format!("invariant {a}")),
        );
    }
    let regressions = server.audit().regressions();
    if regressions > 0 {
        violations.push(format!("{regressions} mention cursor regressions"));
    }
    if !matches!(report.outcome.as_str(), "submitted" | "gave_up") {
        violations.push(format!("outcome: run ended {}", report.outcome));
    }
    report.pass = violations.is_empty();
    report.violations = violations;
    Ok(report)
}
