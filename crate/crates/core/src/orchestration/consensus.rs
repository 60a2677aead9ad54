//! The aggregation 𝒞 over approve/reject votes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::{AgentId, Message, MessageKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Approve,
    Reject,
}

impl Vote {
    pub fn as_str(self) -> &'static str {
        match self {
            Vote::Approve => "approve",
            Vote::Reject => "reject",
        }
    }

    /// Vote bodies are exactly `approve` or `reject`.
    pub fn parse(body: &str) -> Option<Vote> {
        match body {
            "approve" => Some(Vote::Approve),
            "reject" => Some(Vote::Reject),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMode {
    #[default]
    UnanimousQuorum,
    Majority,
}

/// Non-negative rational in `[0, 1]`, written `"n/d"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction {
    num: u32,
    den: u32,
}

impl Fraction {
    pub const HALF: Fraction = Fraction { num: 1, den: 2 };

    pub fn new(num: u32, den: u32) -> Result<Self, String> {
        if den == 0 {
            return Err("denominator is zero".into());
        }
        if num > den {
            return Err(format!("{num}/{den} exceeds 1"));
        }
        Ok(Self { num, den })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    /// ceil(self × n).
    pub fn ceil_of(self, n: usize) -> usize {
        let p = self.num as u64 * n as u64;
        p.div_ceil(self.den as u64) as usize
    }
}

impl Default for Fraction {
    fn default() -> Self {
        Fraction::HALF
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, d) = s
            .split_once('/')
            .ok_or_else(|| format!("expected n/d, got {s:?}"))?;
        let n: u32 = n
            .trim()
            .parse()
            .map_err(|_| format!("bad numerator in {s:?}"))?;
        let d: u32 = d
            .trim()
            .parse()
            .map_err(|_| format!("bad denominator in {s:?}"))?;
        Fraction::new(n, d)
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusPolicy {
    #[serde(default)]
    pub mode: ConsensusMode,
    #[serde(default)]
    pub quorum_fraction: Fraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusOutcome {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusDecision {
    pub outcome: ConsensusOutcome,
    pub approvals: usize,
    pub rejections: usize,
    pub polled: usize,
    pub quorum: usize,
}

impl ConsensusDecision {
    pub fn accepted(&self) -> bool {
        self.outcome == ConsensusOutcome::Accepted
    }
}

/// Pure and order-insensitive: only the counts of each vote matter.
pub fn decide_consensus(
    votes: &[Vote],
    polled: usize,
    policy: ConsensusPolicy,
) -> ConsensusDecision {
    let approvals = votes.iter().filter(|v| **v == Vote::Approve).count();
    let rejections = votes.len() - approvals;
    let quorum = policy.quorum_fraction.ceil_of(polled);
    let quorate = votes.len() >= quorum;
    let accepted = quorate
        && match policy.mode {
            ConsensusMode::UnanimousQuorum => rejections == 0,
            ConsensusMode::Majority => approvals > rejections,
        };
    ConsensusDecision {
        outcome: if accepted {
            ConsensusOutcome::Accepted
        } else {
            ConsensusOutcome::Rejected
        },
        approvals,
        rejections,
        polled,
        quorum,
    }
}

/// Votes on the candidate at `candidate_seq`, read from a transcript.
///
/// Only `vote` messages from `polled` agents count; the window ends at the
/// next candidate or at `until_seq` (exclusive), whichever is first. An
/// agent's first vote wins. Result is in transcript order.
pub fn collect_votes(
    messages: &[Message],
    candidate_seq: u64,
    polled: &BTreeSet<AgentId>,
    until_seq: Option<u64>,
) -> Vec<(AgentId, Vote)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for m in messages.iter().filter(|m| m.seq > candidate_seq) {
        if until_seq.is_some_and(|u| m.seq >= u) || m.kind == MessageKind::Candidate {
            break;
        }
        if m.kind != MessageKind::Vote || !polled.contains(&m.sender) {
            continue;
        }
        if let Some(v) = Vote::parse(&m.body) {
            if seen.insert(m.sender.clone()) {
                out.push((m.sender.clone(), v));
            }
        }
    }
    out
}
