//! Scripted scenarios under a logical clock.
//!
//! A [`Scenario`] names a task, a cast of [`ScriptedAgent`]s and an
//! [`Expectation`]. [`run_scenario`] embeds a server with an injected
//! clock, drives every role through a [`Simulation`] and checks the result
//! with [`assert_outcome`] and the transcript audit. Transcript bytes are a
//! pure function of the scenario and its seed.
//!
//! [`run_stress`] runs the same scenario over TCP with real threads and a
//! wall clock, checking only order-insensitive properties.

pub mod conformance;
pub mod generate;
mod report;
mod scenario;
mod script;
mod sim;
mod stress;

use std::fmt;

use serde::Serialize;

pub use report::{assert_outcome, run_scenario, RunReport};
pub use scenario::{
    load_scenario, parse_scenario, DefaultBehavior, DelaySpec, EventSpec, Expectation,
    ExpectedOutcome, Pattern, Response, Rule, Scenario, ScriptedAgent, Trigger,
};
pub use script::ScriptedReasoner;
pub use sim::{Simulation, MAX_PASSES_PER_TICK, TICK_CEILING};
pub use stress::{run_stress, StressOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HarnessErrorCode {
    ScenarioParseError,
    ScenarioInvalid,
    RunAborted,
    /// Writing transcripts or reports failed.
    Io,
}

impl HarnessErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            HarnessErrorCode::ScenarioParseError => "SCENARIO_PARSE_ERROR",
            HarnessErrorCode::ScenarioInvalid => "SCENARIO_INVALID",
            HarnessErrorCode::RunAborted => "RUN_ABORTED",
            HarnessErrorCode::Io => "IO",
        }
    }
}

impl fmt::Display for HarnessErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct HarnessError {
    pub code: HarnessErrorCode,
    pub message: String,
}

impl HarnessError {
    pub fn new(code: HarnessErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub(crate) fn aborted(e: impl fmt::Display) -> Self {
        Self::new(HarnessErrorCode::RunAborted, e.to_string())
    }
}
