use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::AgentId;

/// Upper bound on steps in one plan; keeps message counts bounded.
pub const MAX_PLAN_STEPS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub id: String,
    pub description: String,
}

impl Step {
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            description: description.into(),
        }
    }
}

/// π_t: a versioned list of steps and the allocation φ of steps to workers.
///
/// The serialized form is the exact body of a `plan` message; field order
/// and the sorted allocation map make it canonical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub version: u32,
    pub goal: String,
    pub steps: Vec<Step>,
    pub allocation: BTreeMap<AgentId, Vec<String>>,
}

/// What a reasoner proposes; the planner stamps the version and fills a
/// missing allocation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDraft {
    #[serde(default)]
    pub version: Option<u32>,
    #[serde(default)]
    pub goal: Option<String>,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub allocation: Option<BTreeMap<AgentId, Vec<String>>>,
}

impl Plan {
    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    /// Parses and validates a `plan` message body.
    pub fn parse(body: &str) -> Result<Plan, String> {
        let plan: Plan = serde_json::from_str(body).map_err(|e| e.to_string())?;
        plan.validate()?;
        Ok(plan)
    }

    /// Step ids are unique and non-empty and every step is allocated to
    /// exactly one worker.
    pub fn validate(&self) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err("plan has no steps".into());
        }
        if self.steps.len() > MAX_PLAN_STEPS {
            return Err(format!("plan has more than {MAX_PLAN_STEPS} steps"));
        }
        let mut ids = BTreeSet::new();
        for s in &self.steps {
            if s.id.trim().is_empty() || s.id.contains(char::is_whitespace) || s.id.contains(':') {
                return Err(format!("bad step id {:?}", s.id));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(format!("duplicate step id {}", s.id));
            }
        }
        let mut owners: BTreeMap<&str, &AgentId> = BTreeMap::new();
        for (w, steps) in &self.allocation {
            for id in steps {
                if !ids.contains(id.as_str()) {
                    return Err(format!("{w} is allocated unknown step {id}"));
                }
                if let Some(prev) = owners.insert(id, w) {
                    return Err(format!("step {id} allocated to both {prev} and {w}"));
                }
            }
        }
        if let Some(s) = self
            .steps
            .iter()
            .find(|s| !owners.contains_key(s.id.as_str()))
        {
            return Err(format!("step {} is not allocated", s.id));
        }
        Ok(())
    }

    pub fn step(&self, id: &str) -> Option<&Step> {
        self.steps.iter().find(|s| s.id == id)
    }

    pub fn owner(&self, step_id: &str) -> Option<&AgentId> {
        self.allocation
            .iter()
            .find(|(_, ids)| ids.iter().any(|i| i == step_id))
            .map(|(w, _)| w)
    }

    /// Steps allocated to `worker`, in plan order.
    pub fn steps_of(&self, worker: &AgentId) -> Vec<&Step> {
        let mine: BTreeSet<&str> = self
            .allocation
            .get(worker)
            .map(|v| v.iter().map(String::as_str).collect())
            .unwrap_or_default();
        self.steps
            .iter()
            .filter(|s| mine.contains(s.id.as_str()))
            .collect()
    }

    /// Workers with at least one step.
    pub fn workers(&self) -> BTreeSet<AgentId> {
        self.allocation
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(w, _)| w.clone())
            .collect()
    }

    /// Builds a plan from a draft. Without an allocation, steps are dealt
    /// round-robin over `workers` in sorted order. Empty allocation lists
    /// are dropped so the canonical body never carries them.
    pub fn from_draft(
        version: u32,
        default_goal: &str,
        draft: PlanDraft,
        workers: &BTreeSet<AgentId>,
    ) -> Result<Plan, String> {
        let allocation = match draft.allocation {
            Some(a) => a.into_iter().filter(|(_, v)| !v.is_empty()).collect(),
            None => {
                if workers.is_empty() {
                    return Err("no workers available for allocation".into());
                }
                let ws: Vec<&AgentId> = workers.iter().collect();
                let mut a: BTreeMap<AgentId, Vec<String>> = BTreeMap::new();
                for (i, s) in draft.steps.iter().enumerate() {
                    a.entry(ws[i % ws.len()].clone())
                        .or_default()
                        .push(s.id.clone());
                }
                a
            }
        };
        let plan = Plan {
            version,
            goal: draft
                .goal
                .filter(|g| !g.trim().is_empty())
                .unwrap_or_else(|| default_goal.to_owned()),
            steps: draft.steps,
            allocation,
        };
        plan.validate()?;
        if let Some(w) = plan.allocation.keys().find(|w| !workers.contains(*w)) {
            return Err(format!("{w} is not an available worker"));
        }
        Ok(plan)
    }
}
