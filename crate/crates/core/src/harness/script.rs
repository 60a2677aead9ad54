//! [`Reasoner`] driven by a scenario's ordered rules.
//!
//! Each decision point is matched as a `(kind, text)` pair against the
//! rules whose response kind fits that decision; the first match wins.
//!
//! | decision            | matched as                         | response kind      |
//! |---------------------|------------------------------------|--------------------|
//! | initial plan        | `(system, task)`                   | `plan`             |
//! | plan revision       | each contribution, then `(system, trigger)` | `plan`    |
//! | give-up reason      | `(system, "give up: <default>")`   | submission, chat, progress, system |
//! | execute a step      | `(chat, "<id>: <description>")`    | `result`           |
//! | judge a result      | `(result, body)`                   | `critique`         |
//! | compile R*          | `(chat, request)`                  | `candidate`        |
//! | vote                | `(candidate, body)`                | `vote`             |
//! | contribute          | `(kind, body)` of the mention      | progress, suggestion, plan, chat |
//!
//! Unmatched planner decisions use the built-in heuristics. Unmatched
//! decisions of other roles follow the agent's [`DefaultBehavior`].

use serde_json::Value;

use crate::model::{AgentId, AgentRegistration, MessageKind, Role};
use crate::orchestration::consensus::Vote;
use crate::orchestration::plan::PlanDraft;
use crate::orchestration::protocol::{self, GIVE_UP_PREFIX};
use crate::orchestration::reasoner::{
    default_compile, default_initial_plan, default_vote, heuristic_revision, CompileContext,
    Compiled, ContributeContext, Contribution, Delay, ExecOutcome, GiveUpContext, Reasoner,
    RevisionContext, StepContext, Timed, Verdict, VoteContext,
};

use super::scenario::{DefaultBehavior, DelaySpec, Rule, ScriptedAgent};

#[derive(Default)]
struct Vars<'a> {
    task: &'a str,
    body: &'a str,
    sender: &'a str,
    step_id: &'a str,
    step: &'a str,
    answer: &'a str,
}

fn substitute(s: &str, v: &Vars<'_>) -> String {
    s.replace("{{task}}", v.task)
        .replace("{{body}}", v.body)
        .replace("{{sender}}", v.sender)
        .replace("{{step_id}}", v.step_id)
        .replace("{{step}}", v.step)
        .replace("{{answer}}", v.answer)
}

fn fill(t: &Value, v: &Vars<'_>) -> Value {
    match t {
        Value::String(s) => Value::String(substitute(s, v)),
        Value::Array(a) => Value::Array(a.iter().map(|x| fill(x, v)).collect()),
        Value::Object(o) => Value::Object(o.iter().map(|(k, x)| (k.clone(), fill(x, v))).collect()),
        other => other.clone(),
    }
}

/// A string template renders to itself; any other JSON value renders to
/// its compact encoding after filling its string leaves.
fn render(t: &Value, v: &Vars<'_>) -> String {
    match fill(t, v) {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

/// A give-up reason is prose; plan, vote and verdict rules never supply one.
const GIVE_UP_KINDS: [MessageKind; 4] = [
    MessageKind::Submission,
    MessageKind::Chat,
    MessageKind::Progress,
    MessageKind::System,
];

const CONTRIBUTION_KINDS: [MessageKind; 4] = [
    MessageKind::Progress,
    MessageKind::Suggestion,
    MessageKind::Plan,
    MessageKind::Chat,
];

pub struct ScriptedReasoner {
    id: AgentId,
    role: Role,
    task: String,
    rules: Vec<Rule>,
    default: DefaultBehavior,
    /// Clock units per scripted tick.
    unit: u64,
}

impl ScriptedReasoner {
    pub fn new(agent: &ScriptedAgent, task: &str, tick_unit: u64) -> Self {
        Self {
            id: agent.id.clone(),
            role: agent.role,
            task: task.to_owned(),
            rules: agent.rules.clone(),
            default: agent.default,
            unit: tick_unit.max(1),
        }
    }

    fn find(
        &self,
        kind: MessageKind,
        text: &str,
        accept: impl Fn(MessageKind) -> bool,
    ) -> Option<&Rule> {
        self.rules.iter().find(|r| {
            accept(r.response.kind)
                && r.trigger.kind.is_none_or(|k| k == kind)
                && r.trigger.mention_pattern.is_match(text)
        })
    }

    fn delay(&self, d: DelaySpec) -> Delay {
        match d.ticks() {
            Some(n) => Delay::Ticks(n).scaled(self.unit),
            None => Delay::Forever,
        }
    }

    fn plan_from(&self, rule: &Rule, v: &Vars<'_>) -> Option<PlanDraft> {
        let text = render(&rule.response.body_template, v);
        match serde_json::from_str(&text) {
            Ok(d) => Some(d),
            Err(e) => {
                tracing::warn!(agent = %self.id, error = %e, "scripted plan body is not a plan");
                None
            }
        }
    }

    fn echo(&self) -> bool {
        self.default == DefaultBehavior::EchoUncertain
    }
}

impl Reasoner for ScriptedReasoner {
    fn plan_initial(&mut self, task: &str, workers: &[AgentRegistration]) -> Option<PlanDraft> {
        let v = Vars {
            task,
            body: task,
            sender: self.id.as_str(),
            ..Vars::default()
        };
        match self.find(MessageKind::System, task, |k| k == MessageKind::Plan) {
            Some(r) => self.plan_from(r, &v),
            None => default_initial_plan(task, workers),
        }
    }

    fn revise_plan(&mut self, ctx: &RevisionContext<'_>) -> Option<PlanDraft> {
        let is_plan = |k| k == MessageKind::Plan;
        for m in ctx.contributions {
            if let Some(r) = self.find(m.kind, &m.body, is_plan) {
                let v = Vars {
                    task: &self.task,
                    body: &m.body,
                    sender: m.sender.as_str(),
                    ..Vars::default()
                };
                return self.plan_from(r, &v).or_else(|| heuristic_revision(ctx));
            }
        }
        if let Some(r) = self.find(MessageKind::System, ctx.trigger_text, is_plan) {
            let v = Vars {
                task: &self.task,
                body: ctx.trigger_text,
                sender: self.id.as_str(),
                ..Vars::default()
            };
            return self.plan_from(r, &v).or_else(|| heuristic_revision(ctx));
        }
        heuristic_revision(ctx)
    }

    fn give_up_reason(&mut self, ctx: &GiveUpContext<'_>) -> String {
        let text = format!("{GIVE_UP_PREFIX}{}", ctx.default_reason);
        let Some(r) = self.find(MessageKind::System, &text, |k| GIVE_UP_KINDS.contains(&k)) else {
            return ctx.default_reason.to_owned();
        };
        let v = Vars {
            task: &self.task,
            body: ctx.default_reason,
            sender: self.id.as_str(),
            ..Vars::default()
        };
        let out = render(&r.response.body_template, &v);
        out.strip_prefix(GIVE_UP_PREFIX).unwrap_or(&out).to_owned()
    }

    fn execute(&mut self, ctx: &StepContext<'_>) -> Timed<ExecOutcome> {
        let text = format!("{}: {}", ctx.step.id, ctx.step.description);
        match self.find(MessageKind::Chat, &text, |k| k == MessageKind::Result) {
            Some(r) => {
                let v = Vars {
                    task: ctx.goal,
                    body: &text,
                    sender: self.id.as_str(),
                    step_id: &ctx.step.id,
                    step: &ctx.step.description,
                    answer: "",
                };
                Timed::after(
                    self.delay(r.delay_ticks),
                    ExecOutcome::Done(render(&r.response.body_template, &v)),
                )
            }
            None if self.echo() => Timed::now(ExecOutcome::Failed(format!(
                "cannot complete step {}",
                ctx.step.id
            ))),
            None => Timed::after(Delay::Forever, ExecOutcome::Failed("silent".into())),
        }
    }

    fn critique(&mut self, result: &crate::model::Message) -> Option<Timed<Verdict>> {
        let Some(r) = self.find(MessageKind::Result, &result.body, |k| {
            k == MessageKind::Critique
        }) else {
            return self.echo().then(|| {
                Timed::now(Verdict::Uncertain(
                    "the result could not be validated".into(),
                ))
            });
        };
        let v = Vars {
            task: &self.task,
            body: &result.body,
            sender: result.sender.as_str(),
            ..Vars::default()
        };
        let text = render(&r.response.body_template, &v);
        let verdict = match protocol::parse_verdict(&text) {
            Some(p) if p.kind == protocol::VerdictKind::Accept => Verdict::Accept(p.rationale),
            Some(p) => Verdict::Uncertain(p.rationale),
            None => Verdict::Uncertain("critique-internal-error".into()),
        };
        Some(Timed::after(self.delay(r.delay_ticks), verdict))
    }

    fn compile(&mut self, ctx: &CompileContext<'_>) -> Option<Timed<Compiled>> {
        let fallback = default_compile(ctx.accepted_results);
        let Some(r) = self.find(MessageKind::Chat, &ctx.request.body, |k| {
            k == MessageKind::Candidate
        }) else {
            return if self.echo() {
                fallback.map(Timed::now)
            } else {
                None
            };
        };
        let v = Vars {
            task: ctx.goal,
            body: &ctx.request.body,
            sender: ctx.request.sender.as_str(),
            answer: fallback.as_ref().map_or("", |c| c.answer.as_str()),
            ..Vars::default()
        };
        let answer = render(&r.response.body_template, &v);
        let rationale = (ctx.accepted_results.len() > 1).then(|| {
            let all: Vec<u64> = ctx.accepted_results.iter().map(|m| m.seq).collect();
            let chosen = ctx
                .accepted_results
                .iter()
                .rev()
                .find(|m| m.body.trim() == answer.trim())
                .or(ctx.accepted_results.last())
                .map_or(0, |m| m.seq);
            protocol::compile_rationale(chosen, &all, "selected by the compile rule")
        });
        Some(Timed::after(
            self.delay(r.delay_ticks),
            Compiled { answer, rationale },
        ))
    }

    fn vote(&mut self, ctx: &VoteContext<'_>) -> Option<Timed<Vote>> {
        let c = ctx.candidate;
        let Some(r) = self.find(MessageKind::Candidate, &c.body, |k| k == MessageKind::Vote) else {
            return match (self.role, self.default) {
                (Role::Planner, _) => Some(Timed::now(default_vote(ctx))),
                (_, DefaultBehavior::EchoUncertain) => Some(Timed::now(Vote::Reject)),
                (_, DefaultBehavior::Silent) => None,
            };
        };
        let v = Vars {
            task: &self.task,
            body: &c.body,
            sender: c.sender.as_str(),
            answer: &c.body,
            ..Vars::default()
        };
        let vote = Vote::parse(render(&r.response.body_template, &v).trim())?;
        Some(Timed::after(self.delay(r.delay_ticks), vote))
    }

    fn contribute(&mut self, ctx: &ContributeContext<'_>) -> Option<Timed<Contribution>> {
        let m = ctx.message;
        let r = self.find(m.kind, &m.body, |k| CONTRIBUTION_KINDS.contains(&k))?;
        let v = Vars {
            task: ctx.goal,
            body: &m.body,
            sender: m.sender.as_str(),
            ..Vars::default()
        };
        Some(Timed::after(
            self.delay(r.delay_ticks),
            Contribution {
                kind: r.response.kind,
                body: render(&r.response.body_template, &v),
                mentions: r.response.mentions.clone(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::parse_scenario;
    use crate::model::{Message, ThreadId};
    use crate::orchestration::Step;

    fn agent(rules: Value, default: &str) -> ScriptedAgent {
        let v = serde_json::json!({
            "name": "x", "task": "count the edits",
            "agents": [
                {"id": "planner", "role": "planner"},
                {"id": "critique", "role": "critique"},
                {"id": "answer_finding", "role": "answer_finding"},
                {"id": "web", "role": "worker", "rules": rules, "default": default}
            ],
            "expect": {"outcome": "submitted", "max_messages": 9, "max_plan_versions": 1}
        });
        parse_scenario(&v.to_string()).unwrap().agents[3].clone()
    }

    fn msg(kind: MessageKind, body: &str) -> Message {
        Message {
            seq: 4,
            thread: ThreadId::parse("0123456789abcdef0123456789abcdef").unwrap(),
            sender: AgentId::new("planner").unwrap(),
            kind,
            body: body.into(),
            mentions: vec![],
            ts_ms: 0,
        }
    }

    #[test]
    fn execute_renders_placeholders_and_scales_delay() {
        let a = agent(
            serde_json::json!([
                {"trigger": {"mention_pattern": "^s1:"}, "delay_ticks": 4,
                 "response": {"kind": "result", "body_template": "{{step_id}} of {{task}} -> {{step}}"}}
            ]),
            "silent",
        );
        let mut r = ScriptedReasoner::new(&a, "count the edits", 10);
        let step = Step::new("s1", "search");
        let t = r.execute(&StepContext {
            agent: &a.id,
            goal: "count the edits",
            version: 0,
            step: &step,
        });
        assert_eq!(t.delay, Delay::Ticks(40));
        assert_eq!(
            t.value,
            ExecOutcome::Done("s1 of count the edits -> search".into())
        );
        let other = Step::new("s2", "x");
        let t = r.execute(&StepContext {
            agent: &a.id,
            goal: "g",
            version: 0,
            step: &other,
        });
        assert_eq!(t.delay, Delay::Forever);
    }

    #[test]
    fn first_matching_rule_wins_and_kinds_filter() {
        let a = agent(
            serde_json::json!([
                {"trigger": {"mention_pattern": ".*", "kind": "plan"},
                 "response": {"kind": "suggestion", "body_template": "plan seen"}},
                {"trigger": {"mention_pattern": "reminder"}, "delay_ticks": "forever",
                 "response": {"kind": "progress", "body_template": "later"}},
                {"trigger": {"mention_pattern": ".*"},
                 "response": {"kind": "progress", "body_template": "busy with {{sender}}"}}
            ]),
            "silent",
        );
        let mut r = ScriptedReasoner::new(&a, "t", 1);
        let ask = |r: &mut ScriptedReasoner, m: &Message| {
            r.contribute(&ContributeContext {
                agent: &a.id,
                goal: "t",
                plan: None,
                message: m,
            })
        };
        let c = ask(&mut r, &msg(MessageKind::Chat, "@web hello")).unwrap();
        assert_eq!(c.value.body, "busy with planner");
        let c = ask(&mut r, &msg(MessageKind::Chat, "@web reminder: x")).unwrap();
        assert_eq!(c.delay, Delay::Forever);
        let c = ask(&mut r, &msg(MessageKind::Plan, "{}")).unwrap();
        assert_eq!(c.value.body, "plan seen");
    }

    #[test]
    fn defaults_silent_vs_echo() {
        let silent = agent(serde_json::json!([]), "silent");
        let echo = agent(serde_json::json!([]), "echo_uncertain");
        let cand = msg(MessageKind::Candidate, "2732");
        let vctx = VoteContext {
            agent: &silent.id,
            goal: "t",
            candidate: &cand,
            accepted_results: &[],
        };
        assert!(ScriptedReasoner::new(&silent, "t", 1).vote(&vctx).is_none());
        assert_eq!(
            ScriptedReasoner::new(&echo, "t", 1)
                .vote(&vctx)
                .unwrap()
                .value,
            Vote::Reject
        );
        let res = msg(MessageKind::Result, "42");
        assert!(ScriptedReasoner::new(&silent, "t", 1)
            .critique(&res)
            .is_none());
        assert!(matches!(
            ScriptedReasoner::new(&echo, "t", 1)
                .critique(&res)
                .unwrap()
                .value,
            Verdict::Uncertain(_)
        ));
        let step = Step::new("s1", "d");
        let sctx = StepContext {
            agent: &echo.id,
            goal: "t",
            version: 0,
            step: &step,
        };
        let body = ScriptedReasoner::new(&echo, "t", 1)
            .execute(&sctx)
            .value
            .into_body();
        assert!(body.starts_with("error: "), "{body}");
    }

    #[test]
    fn object_templates_render_as_json() {
        let t = serde_json::json!({"steps": [{"id": "s1", "description": "{{body}} \"q\""}]});
        let out = render(
            &t,
            &Vars {
                body: "x",
                ..Vars::default()
            },
        );
        let back: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(back["steps"][0]["description"], "x \"q\"");
    }

    #[test]
    fn malformed_critique_becomes_internal_error() {
        let mut v = serde_json::to_value(agent(serde_json::json!([]), "silent")).unwrap();
        v["role"] = "critique".into();
        v["rules"] = serde_json::json!([
            {"trigger": {"mention_pattern": ".*"}, "response": {"kind": "critique", "body_template": "looks fine"}}
        ]);
        let a: ScriptedAgent = serde_json::from_value(v).unwrap();
        let t = ScriptedReasoner::new(&a, "t", 1)
            .critique(&msg(MessageKind::Result, "1"))
            .unwrap();
        assert_eq!(
            t.value,
            Verdict::Uncertain("critique-internal-error".into())
        );
    }
}
