use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::model::{AgentId, MessageKind, Role};
use crate::orchestration::RunLimits;

use super::{HarnessError, HarnessErrorCode};

/// A regex compiled at load time; serializes back to its source.
#[derive(Clone)]
pub struct Pattern(Regex);

impl Pattern {
    pub fn new(src: &str) -> Result<Self, regex::Error> {
        Regex::new(src).map(Pattern)
    }

    pub fn is_match(&self, text: &str) -> bool {
        self.0.is_match(text)
    }

    pub fn as_str(&self) -> &str {
        self.0.as_str()
    }
}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/{}/", self.0.as_str())
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.as_str() == other.as_str()
    }
}

impl Serialize for Pattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let src = String::deserialize(d)?;
        Pattern::new(&src).map_err(|e| serde::de::Error::custom(format!("invalid regex: {e}")))
    }
}

/// `delay_ticks`: a tick count or `"forever"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelaySpec {
    Ticks(u64),
    Forever,
}

impl Default for DelaySpec {
    fn default() -> Self {
        DelaySpec::Ticks(0)
    }
}

impl DelaySpec {
    pub fn ticks(self) -> Option<u64> {
        match self {
            DelaySpec::Ticks(n) => Some(n),
            DelaySpec::Forever => None,
        }
    }
}

impl Serialize for DelaySpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.ticks() {
            Some(n) => s.serialize_u64(n),
            None => s.serialize_str("forever"),
        }
    }
}

impl<'de> Deserialize<'de> for DelaySpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d) {
            Ok(Raw::N(n)) => Ok(DelaySpec::Ticks(n)),
            Ok(Raw::S(s)) if s == "forever" => Ok(DelaySpec::Forever),
            _ => Err(serde::de::Error::custom(
                "delay_ticks must be a non-negative integer or \"forever\"",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    pub mention_pattern: Pattern,
    #[serde(
        default,
        alias = "kind_filter",
        skip_serializing_if = "Option::is_none"
    )]
    pub kind: Option<MessageKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Response {
    pub kind: MessageKind,
    /// A string, or any JSON value whose string leaves are templates.
    pub body_template: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mentions: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub trigger: Trigger,
    #[serde(default)]
    pub delay_ticks: DelaySpec,
    pub response: Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultBehavior {
    #[default]
    Silent,
    EchoUncertain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedAgent {
    pub id: AgentId,
    pub role: Role,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub default: DefaultBehavior,
}

impl ScriptedAgent {
    pub fn description_or_role(&self) -> String {
        if self.description.is_empty() {
            format!("{} agent", self.role)
        } else {
            self.description.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedOutcome {
    Submitted,
    GaveUp,
}

impl ExpectedOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpectedOutcome::Submitted => "submitted",
            ExpectedOutcome::GaveUp => "gave_up",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub kind: MessageKind,
    pub body_pattern: Pattern,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub outcome: ExpectedOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_prefix: Option<String>,
    pub max_messages: u64,
    pub max_plan_versions: u32,
    #[serde(default)]
    pub required_transcript_events: Vec<EventSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub task: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub limits: RunLimits,
    pub agents: Vec<ScriptedAgent>,
    pub expect: Expectation,
}

impl Scenario {
    pub fn agent(&self, id: &AgentId) -> Option<&ScriptedAgent> {
        self.agents.iter().find(|a| &a.id == id)
    }

    /// Checks every cross-field invariant that the schema cannot express.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: String| Err(HarnessError::new(HarnessErrorCode::ScenarioInvalid, m));
        let mut ids = BTreeSet::new();
        for a in &self.agents {
            if !ids.insert(&a.id) {
                return invalid(format!("duplicate agent id {}", a.id));
            }
        }
        for role in [Role::Planner, Role::Critique, Role::AnswerFinding] {
            let n = self.agents.iter().filter(|a| a.role == role).count();
            if n != 1 {
                return invalid(format!("need exactly one {role} agent, found {n}"));
            }
        }
        if !self.agents.iter().any(|a| a.role == Role::Worker) {
            return invalid("need at least one worker agent".into());
        }
        for (i, a) in self.agents.iter().enumerate() {
            for (j, r) in a.rules.iter().enumerate() {
                if let Some(m) = r.response.mentions.iter().find(|m| !ids.contains(m)) {
                    return invalid(format!(
                        "agents[{i}].rules[{j}].response.mentions names unknown agent {m}"
                    ));
                }
            }
        }
        self.limits
            .validate()
            .or_else(|e| invalid(format!("limits: {e}")))?;
        let e = &self.expect;
        match e.outcome {
            ExpectedOutcome::Submitted if e.answer_prefix.is_some() => {
                return invalid("expect.answer_prefix only applies to gave_up".into())
            }
            ExpectedOutcome::GaveUp if e.answer.is_some() => {
                return invalid("expect.answer only applies to submitted".into())
            }
            _ => {}
        }
        if e.max_messages == 0 || e.max_plan_versions == 0 {
            return invalid("expect.max_messages and expect.max_plan_versions must be >= 1".into());
        }
        Ok(())
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario, HarnessError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let s: Scenario = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let at = if path.is_empty() || path == "." {
            String::new()
        } else {
            format!(" at {path}")
        };
        HarnessError::new(
            HarnessErrorCode::ScenarioParseError,
            format!(
                "line {} column {}{at}: {inner}",
                inner.line(),
                inner.column()
            ),
        )
    })?;
    de.end().map_err(|e| {
        HarnessError::new(
            HarnessErrorCode::ScenarioParseError,
            format!("line {} column {}: {e}", e.line(), e.column()),
        )
    })?;
    s.validate()?;
    Ok(s)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        HarnessError::new(
            HarnessErrorCode::ScenarioParseError,
            format!("{}: {e}", path.display()),
        )
    })?;
    parse_scenario(&text)
        .map_err(|e| HarnessError::new(e.code, format!("{}: {}", path.display(), e.message)))
}
