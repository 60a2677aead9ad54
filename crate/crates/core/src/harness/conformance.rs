//! Black-box contract suite for the seven primitives plus `get_transcript`.
//!
//! Every case runs against a fresh [`Fixture`] and compares error codes as
//! exact wire strings. The same cases run in-process ([`LocalTarget`]) and
//! over loopback TCP ([`TcpTarget`]); another implementation can be checked
//! by providing its own [`ConformanceTarget`].

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;

use crate::client::{A2aApi, LocalSession, Session};
use crate::error::{ProtocolError, ProtocolResult};
use crate::model::{
    AgentId, AgentRegistration, MessageKind, Role, ThreadId, ThreadStatus, MAX_BODY_BYTES,
};
use crate::server::tcp::TcpServer;
use crate::server::wire::RegisterInfo;
use crate::server::{Server, ServerConfig, AUTO_CLOSE_SUMMARY};

/// Longest wait the fixture servers allow; clamping is checked against it.
pub const FIXTURE_WAIT_MAX_MS: u64 = 200;

/// One isolated server plus the agents registered on it so far.
pub trait Fixture {
    /// Registers `id` and returns the normalized id.
    fn register(&self, id: &str, description: &str, role: Role) -> ProtocolResult<AgentId>;

    /// The handle acting as a registered agent.
    fn session(&self, agent: &AgentId) -> Arc<dyn A2aApi>;

    /// A handle for an agent that was never registered. Transports that
    /// authenticate at connect time refuse here, with `HELLO_REJECTED`.
    fn unregistered(&self, agent: &AgentId) -> ProtocolResult<Arc<dyn A2aApi>>;

    fn list_agents(&self) -> ProtocolResult<Vec<AgentRegistration>>;
}

pub trait ConformanceTarget {
    fn name(&self) -> &str;
    fn fresh(&self) -> Box<dyn Fixture>;
}

fn fixture_server() -> Arc<Server> {
    Server::new(ServerConfig {
        wait_timeout_default_ms: FIXTURE_WAIT_MAX_MS,
        wait_timeout_max_ms: FIXTURE_WAIT_MAX_MS,
        auto_register: false,
        ..ServerConfig::default()
    })
    .expect("fixture config is valid")
}

/// Calls the server directly through [`LocalSession`].
pub struct LocalTarget;

struct LocalFixture {
    server: Arc<Server>,
}

impl Fixture for LocalFixture {
    fn register(&self, id: &str, description: &str, role: Role) -> ProtocolResult<AgentId> {
        let id = AgentId::new(id)?;
        self.server
            .register_agent(AgentRegistration::new(id, description, role))
    }

    fn session(&self, agent: &AgentId) -> Arc<dyn A2aApi> {
        Arc::new(LocalSession::new(self.server.clone(), agent.clone()))
    }

    fn unregistered(&self, agent: &AgentId) -> ProtocolResult<Arc<dyn A2aApi>> {
        Ok(self.session(agent))
    }

    fn list_agents(&self) -> ProtocolResult<Vec<AgentRegistration>> {
        Ok(self.server.list_agents())
    }
}

impl ConformanceTarget for LocalTarget {
    fn name(&self) -> &str {
        "local"
    }

    fn fresh(&self) -> Box<dyn Fixture> {
        Box::new(LocalFixture {
            server: fixture_server(),
        })
    }
}

/// Speaks the wire protocol to a server bound on an ephemeral loopback
/// port. Agents register through `hello` with a `register` field.
pub struct TcpTarget;

struct TcpFixture {
    sessions: Mutex<BTreeMap<AgentId, Session>>,
    endpoint: String,
    // Dropped after the sessions.
    tcp: TcpServer,
}

impl Fixture for TcpFixture {
    fn register(&self, id: &str, description: &str, role: Role) -> ProtocolResult<AgentId> {
        let agent = AgentId::new(id)?;
        let info = RegisterInfo {
            description: description.to_owned(),
            role,
        };
        let s = Session::connect(&self.endpoint, &agent, Some(info))?;
        self.sessions.lock().insert(agent.clone(), s);
        Ok(agent)
    }

    fn session(&self, agent: &AgentId) -> Arc<dyn A2aApi> {
        Arc::new(self.sessions.lock()[agent].clone())
    }

    fn unregistered(&self, agent: &AgentId) -> ProtocolResult<Arc<dyn A2aApi>> {
        Ok(Arc::new(Session::connect(&self.endpoint, agent, None)?))
    }

    fn list_agents(&self) -> ProtocolResult<Vec<AgentRegistration>> {
        let any = self.sessions.lock().values().next().cloned();
        match any {
            Some(s) => s.list_agents(),
            // No wire identity exists before the first registration.
            None => Ok(self.tcp.server().list_agents()),
        }
    }
}

impl ConformanceTarget for TcpTarget {
    fn name(&self) -> &str {
        "tcp"
    }

    fn fresh(&self) -> Box<dyn Fixture> {
        let tcp = TcpServer::bind(fixture_server(), "127.0.0.1:0").expect("bind loopback");
        Box::new(TcpFixture {
            sessions: Mutex::new(BTreeMap::new()),
            endpoint: tcp.local_addr().to_string(),
            tcp,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConformanceReport {
    pub target: String,
    pub cases: Vec<CaseOutcome>,
    pub elapsed_ms: u64,
}

impl ConformanceReport {
    pub fn passed(&self) -> usize {
        self.cases.iter().filter(|c| c.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        self.passed() == self.cases.len()
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseOutcome> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

type Check = Result<(), String>;
type Case = (&'static str, fn(&dyn Fixture) -> Check);

/// Every contract case, by name.
pub fn cases() -> &'static [Case] {
    CASES
}

pub fn run_conformance(target: &dyn ConformanceTarget) -> ConformanceReport {
    let started = Instant::now();
    let cases = CASES
        .iter()
        .map(|(name, case)| {
            let fx = target.fresh();
            let r = case(fx.as_ref());
            CaseOutcome {
                name,
                passed: r.is_ok(),
                detail: r.err(),
            }
        })
        .collect();
    ConformanceReport {
        target: target.name().to_owned(),
        cases,
        elapsed_ms: started.elapsed().as_millis() as u64,
    }
}

// ── helpers ─────────────────────────────────────────────────────────

fn ok<T>(r: ProtocolResult<T>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: unexpected {}: {}", e.code.as_str(), e.message))
}

fn code<T: std::fmt::Debug>(r: ProtocolResult<T>, want: &str) -> Result<ProtocolError, String> {
    match r {
        Err(e) if e.code.as_str() == want => Ok(e),
        Err(e) => Err(format!(
            "expected {want}, got {}: {}",
            e.code.as_str(),
            e.message
        )),
        Ok(v) => Err(format!("expected {want}, got success {v:?}")),
    }
}

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn id(s: &str) -> AgentId {
    AgentId::new(s).expect("static id")
}

/// Registers planner, web, critique and answer_finding; returns them in
/// that order.
fn cast(fx: &dyn Fixture) -> Result<[AgentId; 4], String> {
    Ok([
        ok(
            fx.register("planner", "decomposes tasks", Role::Planner),
            "register",
        )?,
        ok(
            fx.register("web", "performs web searches", Role::Worker),
            "register",
        )?,
        ok(
            fx.register("critique", "evaluates results", Role::Critique),
            "register",
        )?,
        ok(
            fx.register("answer_finding", "compiles answers", Role::AnswerFinding),
            "register",
        )?,
    ])
}

/// A cast plus an open thread created by the planner with web and critique.
fn opened(fx: &dyn Fixture) -> Result<([AgentId; 4], ThreadId), String> {
    let c = cast(fx)?;
    let t = ok(
        fx.session(&c[0])
            .create_thread(&[c[1].clone(), c[2].clone()]),
        "create_thread",
    )?;
    Ok((c, t))
}

fn closed(fx: &dyn Fixture) -> Result<([AgentId; 4], ThreadId), String> {
    let (c, t) = opened(fx)?;
    ok(fx.session(&c[0]).close_thread(&t, "done"), "close_thread")?;
    Ok((c, t))
}

fn bogus_thread() -> ThreadId {
    ThreadId::parse("ffffffffffffffffffffffffffffffff").expect("valid shape")
}

fn send(
    fx: &dyn Fixture,
    from: &AgentId,
    t: &ThreadId,
    body: &str,
) -> ProtocolResult<crate::model::Message> {
    fx.session(from)
        .send_message(t, MessageKind::Chat, body, &[])
}

fn participants(fx: &dyn Fixture, t: &ThreadId, reader: &AgentId) -> Result<Vec<AgentId>, String> {
    Ok(ok(fx.session(reader).get_transcript(t), "get_transcript")?
        .header
        .participants)
}

// ── cases ───────────────────────────────────────────────────────────

static CASES: &[Case] = &[
    ("list_agents/empty_registry", |fx| {
        let l = ok(fx.list_agents(), "list_agents")?;
        ensure(l.is_empty(), || format!("expected [], got {l:?}"))
    }),
    ("register/returns_id_and_is_listed", |fx| {
        let w = ok(
            fx.register("web", "performs web searches", Role::Worker),
            "register",
        )?;
        ensure(w.as_str() == "web", || format!("returned {w}"))?;
        let l = ok(fx.session(&w).list_agents(), "list_agents")?;
        ensure(
            l.len() == 1
                && l[0].id == w
                && l[0].description == "performs web searches"
                && l[0].role == Role::Worker,
            || format!("listed {l:?}"),
        )
    }),
    ("register/duplicate_id", |fx| {
        ok(fx.register("web", "a", Role::Worker), "register")?;
        code(fx.register("web", "b", Role::Worker), "DUPLICATE_AGENT_ID").map(drop)
    }),
    ("register/id_starting_with_digit", |fx| {
        code(fx.register("9bots", "a", Role::Worker), "BAD_AGENT_ID").map(drop)
    }),
    ("register/empty_id", |fx| {
        code(fx.register("", "a", Role::Worker), "BAD_AGENT_ID").map(drop)
    }),
    ("register/uppercase_id", |fx| {
        code(fx.register("Web", "a", Role::Worker), "BAD_AGENT_ID").map(drop)
    }),
    ("list_agents/sorted_by_id", |fx| {
        for n in ["c", "a", "b"] {
            ok(fx.register(n, "x", Role::Worker), "register")?;
        }
        let l: Vec<String> = ok(fx.list_agents(), "list_agents")?
            .into_iter()
            .map(|r| r.id.to_string())
            .collect();
        ensure(l == ["a", "b", "c"], || format!("order {l:?}"))
    }),
    ("list_agents/six_roles", |fx| {
        cast(fx)?;
        ok(
            fx.register("document_processing", "reads files", Role::Worker),
            "register",
        )?;
        ok(
            fx.register("reasoning_coding", "writes code", Role::Worker),
            "register",
        )?;
        let l = ok(fx.list_agents(), "list_agents")?;
        ensure(
            l.len() == 6 && l.iter().all(|r| !r.description.is_empty()),
            || format!("{l:?}"),
        )
    }),
    ("create_thread/creator_joins", |fx| {
        let (c, t) = opened(fx)?;
        let tr = ok(fx.session(&c[0]).get_transcript(&t), "get_transcript")?;
        let want = vec![c[2].clone(), c[0].clone(), c[1].clone()];
        ensure(
            tr.header.participants == want
                && tr.header.creator == c[0]
                && tr.header.status == ThreadStatus::Open
                && tr.header.summary.is_none()
                && tr.messages.is_empty(),
            || format!("header {:?}", tr.header),
        )
    }),
    ("create_thread/creator_only", |fx| {
        let c = cast(fx)?;
        let t = ok(fx.session(&c[0]).create_thread(&[]), "create_thread")?;
        let p = participants(fx, &t, &c[0])?;
        ensure(p == [c[0].clone()], || format!("participants {p:?}"))
    }),
    ("create_thread/unknown_participant", |fx| {
        let c = cast(fx)?;
        let e = code(
            fx.session(&c[0])
                .create_thread(&[c[1].clone(), id("ghost")]),
            "UNKNOWN_AGENT",
        )?;
        ensure(e.message.contains("ghost"), || {
            format!("message {:?} omits ghost", e.message)
        })
    }),
    ("create_thread/ids_are_fresh_hex", |fx| {
        let c = cast(fx)?;
        let a = ok(fx.session(&c[0]).create_thread(&[]), "create_thread")?;
        let b = ok(fx.session(&c[0]).create_thread(&[]), "create_thread")?;
        let shape = |t: &ThreadId| {
            t.as_str().len() == 32
                && t.as_str()
                    .bytes()
                    .all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
        };
        ensure(a != b && shape(&a) && shape(&b), || format!("{a} {b}"))
    }),
    ("add_participant/grows_set", |fx| {
        let (c, t) = opened(fx)?;
        ok(
            fx.session(&c[0]).add_participant(&t, &c[3]),
            "add_participant",
        )?;
        let p = participants(fx, &t, &c[0])?;
        ensure(p.len() == 4 && p.contains(&c[3]), || {
            format!("participants {p:?}")
        })
    }),
    ("add_participant/idempotent", |fx| {
        let (c, t) = opened(fx)?;
        ok(
            fx.session(&c[0]).add_participant(&t, &c[1]),
            "add_participant",
        )?;
        let p = participants(fx, &t, &c[0])?;
        ensure(p.len() == 3, || format!("participants {p:?}"))
    }),
    ("add_participant/unknown_thread", |fx| {
        let c = cast(fx)?;
        code(
            fx.session(&c[0]).add_participant(&bogus_thread(), &c[1]),
            "UNKNOWN_THREAD",
        )
        .map(drop)
    }),
    ("add_participant/closed_thread", |fx| {
        let (c, t) = closed(fx)?;
        code(
            fx.session(&c[0]).add_participant(&t, &c[3]),
            "THREAD_CLOSED",
        )
        .map(drop)
    }),
    ("add_participant/caller_not_participant", |fx| {
        let (c, t) = opened(fx)?;
        code(
            fx.session(&c[3]).add_participant(&t, &c[3]),
            "NOT_PARTICIPANT",
        )
        .map(drop)
    }),
    ("add_participant/unregistered_agent", |fx| {
        let (c, t) = opened(fx)?;
        code(
            fx.session(&c[0]).add_participant(&t, &id("ghost")),
            "UNKNOWN_AGENT",
        )
        .map(drop)
    }),
    ("add_participant/rejoin_gets_no_earlier_mentions", |fx| {
        let (c, t) = opened(fx)?;
        let p = fx.session(&c[0]);
        ok(send(fx, &c[0], &t, "@web first"), "send")?;
        ok(p.remove_participant(&t, &c[1]), "remove_participant")?;
        ok(p.add_participant(&t, &c[1]), "add_participant")?;
        let got = ok(fx.session(&c[1]).wait_for_mentions(None, Some(0)), "wait")?;
        ensure(got.is_empty(), || {
            format!("rejoined agent received {got:?}")
        })
    }),
    ("remove_participant/shrinks_set", |fx| {
        let (c, t) = opened(fx)?;
        ok(
            fx.session(&c[0]).remove_participant(&t, &c[1]),
            "remove_participant",
        )?;
        let p = participants(fx, &t, &c[0])?;
        ensure(!p.contains(&c[1]) && p.len() == 2, || {
            format!("participants {p:?}")
        })
    }),
    ("remove_participant/absent_agent_is_noop", |fx| {
        let (c, t) = opened(fx)?;
        ok(
            fx.session(&c[0]).remove_participant(&t, &c[3]),
            "remove_participant",
        )?;
        let p = participants(fx, &t, &c[0])?;
        ensure(p.len() == 3, || format!("participants {p:?}"))
    }),
    ("remove_participant/unknown_thread", |fx| {
        let c = cast(fx)?;
        code(
            fx.session(&c[0]).remove_participant(&bogus_thread(), &c[1]),
            "UNKNOWN_THREAD",
        )
        .map(drop)
    }),
    ("remove_participant/closed_thread", |fx| {
        let (c, t) = closed(fx)?;
        code(
            fx.session(&c[0]).remove_participant(&t, &c[1]),
            "THREAD_CLOSED",
        )
        .map(drop)
    }),
    ("remove_participant/caller_not_participant", |fx| {
        let (c, t) = opened(fx)?;
        code(
            fx.session(&c[3]).remove_participant(&t, &c[1]),
            "NOT_PARTICIPANT",
        )
        .map(drop)
    }),
    ("remove_participant/pending_mentions_dropped", |fx| {
        let (c, t) = opened(fx)?;
        ok(send(fx, &c[0], &t, "@web do this"), "send")?;
        ok(
            fx.session(&c[0]).remove_participant(&t, &c[1]),
            "remove_participant",
        )?;
        let got = ok(fx.session(&c[1]).wait_for_mentions(None, Some(0)), "wait")?;
        ensure(got.is_empty(), || format!("removed agent received {got:?}"))
    }),
    ("remove_participant/last_one_auto_closes", |fx| {
        let c = cast(fx)?;
        let p = fx.session(&c[0]);
        let t = ok(p.create_thread(&[]), "create_thread")?;
        ok(p.remove_participant(&t, &c[0]), "remove_participant")?;
        let tr = ok(p.get_transcript(&t), "get_transcript")?;
        let last = tr.messages.last().map(|m| (m.kind, m.body.clone()));
        ensure(
            tr.header.status == ThreadStatus::Closed
                && tr.header.summary.as_deref() == Some(AUTO_CLOSE_SUMMARY)
                && last == Some((MessageKind::System, format!("closed: {AUTO_CLOSE_SUMMARY}"))),
            || format!("header {:?}, last {last:?}", tr.header),
        )
    }),
    ("send_message/broadcast_notifies_nobody", |fx| {
        let (c, t) = opened(fx)?;
        let m = ok(
            fx.session(&c[0])
                .send_message(&t, MessageKind::Plan, "{\"steps\":[]}", &[]),
            "send",
        )?;
        ensure(
            m.seq == 1 && m.mentions.is_empty() && m.sender == c[0],
            || format!("{m:?}"),
        )?;
        for a in &c[1..3] {
            let got = ok(fx.session(a).wait_for_mentions(None, Some(0)), "wait")?;
            ensure(got.is_empty(), || {
                format!("{a} was notified of a broadcast")
            })?;
        }
        Ok(())
    }),
    ("send_message/inline_mention_is_delivered", |fx| {
        let (c, t) = opened(fx)?;
        let m = ok(
            send(fx, &c[0], &t, "@web, we have not yet received the data"),
            "send",
        )?;
        ensure(m.mentions == [c[1].clone()], || {
            format!("mentions {:?}", m.mentions)
        })?;
        let got = ok(fx.session(&c[1]).wait_for_mentions(None, Some(0)), "wait")?;
        ensure(got == [m.clone()], || format!("delivered {got:?}"))
    }),
    ("send_message/mentions_merge_dedup_and_skip_sender", |fx| {
        let (c, t) = opened(fx)?;
        let m = ok(
            fx.session(&c[0]).send_message(
                &t,
                MessageKind::Chat,
                "@critique and @web and @web and @planner and @unknown",
                &[c[1].clone()],
            ),
            "send",
        )?;
        ensure(m.mentions == [c[1].clone(), c[2].clone()], || {
            format!("mentions {:?}", m.mentions)
        })
    }),
    ("send_message/mention_outside_thread", |fx| {
        let (c, t) = opened(fx)?;
        let e = code(
            send(fx, &c[0], &t, "@answer_finding compile"),
            "MENTION_NOT_PARTICIPANT",
        )?;
        ensure(e.message.contains("answer_finding"), || {
            format!("message {:?}", e.message)
        })?;
        let n = ok(fx.session(&c[0]).get_transcript(&t), "get_transcript")?
            .messages
            .len();
        ensure(n == 0, || {
            format!("log holds {n} messages after a rejected send")
        })
    }),
    ("send_message/explicit_mention_unregistered", |fx| {
        let (c, t) = opened(fx)?;
        code(
            fx.session(&c[0])
                .send_message(&t, MessageKind::Chat, "x", &[id("ghost")]),
            "UNKNOWN_AGENT",
        )
        .map(drop)
    }),
    ("send_message/unknown_thread", |fx| {
        let c = cast(fx)?;
        code(send(fx, &c[0], &bogus_thread(), "hi"), "UNKNOWN_THREAD").map(drop)
    }),
    ("send_message/closed_thread", |fx| {
        let (c, t) = closed(fx)?;
        code(send(fx, &c[0], &t, "late"), "THREAD_CLOSED").map(drop)
    }),
    ("send_message/sender_not_participant", |fx| {
        let (c, t) = opened(fx)?;
        code(send(fx, &c[3], &t, "hi"), "NOT_PARTICIPANT").map(drop)
    }),
    ("send_message/body_size_cap", |fx| {
        let (c, t) = opened(fx)?;
        ok(
            send(fx, &c[0], &t, &"a".repeat(MAX_BODY_BYTES)),
            "send at the cap",
        )?;
        code(
            send(fx, &c[0], &t, &"a".repeat(MAX_BODY_BYTES + 1)),
            "BODY_TOO_LARGE",
        )
        .map(drop)
    }),
    ("send_message/vote_and_critique_bodies", |fx| {
        let (c, t) = opened(fx)?;
        let s = fx.session(&c[2]);
        ok(
            s.send_message(&t, MessageKind::Vote, "approve", &[]),
            "approve vote",
        )?;
        ok(
            s.send_message(&t, MessageKind::Critique, "uncertain: no source", &[]),
            "critique",
        )?;
        code(
            s.send_message(&t, MessageKind::Vote, "yes", &[]),
            "BAD_REQUEST",
        )?;
        code(
            s.send_message(&t, MessageKind::Critique, "looks fine", &[]),
            "BAD_REQUEST",
        )
        .map(drop)
    }),
    ("send_message/seq_is_dense", |fx| {
        let (c, t) = opened(fx)?;
        let mut seqs = Vec::new();
        for (i, a) in [&c[0], &c[1], &c[2], &c[0]].into_iter().enumerate() {
            seqs.push(ok(send(fx, a, &t, &format!("m{i}")), "send")?.seq);
        }
        ensure(seqs == [1, 2, 3, 4], || format!("seqs {seqs:?}"))
    }),
    ("wait_for_mentions/prequeued_returns_at_once", |fx| {
        let (c, t) = opened(fx)?;
        ok(send(fx, &c[0], &t, "@web go"), "send")?;
        let started = Instant::now();
        let got = ok(
            fx.session(&c[1])
                .wait_for_mentions(None, Some(FIXTURE_WAIT_MAX_MS)),
            "wait",
        )?;
        let took = started.elapsed();
        ensure(
            got.len() == 1 && took < Duration::from_millis(FIXTURE_WAIT_MAX_MS / 2),
            || format!("{} messages after {took:?}", got.len()),
        )
    }),
    ("wait_for_mentions/timeout_returns_empty", |fx| {
        let c = cast(fx)?;
        let started = Instant::now();
        let got = ok(fx.session(&c[1]).wait_for_mentions(None, Some(60)), "wait")?;
        let took = started.elapsed();
        ensure(
            got.is_empty() && took >= Duration::from_millis(60) && took < Duration::from_secs(2),
            || format!("{} messages after {took:?}", got.len()),
        )
    }),
    ("wait_for_mentions/timeout_is_clamped", |fx| {
        let c = cast(fx)?;
        let started = Instant::now();
        let got = ok(
            fx.session(&c[1]).wait_for_mentions(None, Some(60_000)),
            "wait",
        )?;
        let took = started.elapsed();
        ensure(got.is_empty() && took < Duration::from_secs(3), || {
            format!("returned after {took:?}")
        })
    }),
    ("wait_for_mentions/batches_in_thread_seq_order", |fx| {
        let (c, t1) = opened(fx)?;
        let t2 = ok(
            fx.session(&c[0]).create_thread(&[c[1].clone()]),
            "create_thread",
        )?;
        let mut sent = Vec::new();
        for (t, b) in [
            (&t2, "@web a"),
            (&t1, "@web b"),
            (&t2, "@web c"),
            (&t1, "@web d"),
        ] {
            sent.push(ok(send(fx, &c[0], t, b), "send")?);
        }
        sent.sort_by(|a, b| (&a.thread, a.seq).cmp(&(&b.thread, b.seq)));
        let got = ok(fx.session(&c[1]).wait_for_mentions(None, Some(0)), "wait")?;
        ensure(got == sent, || format!("delivered {got:?}"))
    }),
    ("wait_for_mentions/thread_filter", |fx| {
        let (c, t1) = opened(fx)?;
        let t2 = ok(
            fx.session(&c[0]).create_thread(&[c[1].clone()]),
            "create_thread",
        )?;
        let a = ok(send(fx, &c[0], &t1, "@web a"), "send")?;
        let b = ok(send(fx, &c[0], &t2, "@web b"), "send")?;
        let w = fx.session(&c[1]);
        let first = ok(w.wait_for_mentions(Some(&t2), Some(0)), "wait")?;
        let rest = ok(w.wait_for_mentions(None, Some(0)), "wait")?;
        ensure(first == [b] && rest == [a], || {
            format!("{first:?} then {rest:?}")
        })
    }),
    ("wait_for_mentions/at_most_once", |fx| {
        let (c, t) = opened(fx)?;
        ok(send(fx, &c[0], &t, "@web once"), "send")?;
        let w = fx.session(&c[1]);
        let a = ok(w.wait_for_mentions(None, Some(0)), "wait")?;
        let b = ok(w.wait_for_mentions(None, Some(0)), "wait")?;
        ensure(a.len() == 1 && b.is_empty(), || {
            format!("{} then {}", a.len(), b.len())
        })
    }),
    ("wait_for_mentions/woken_by_later_send", |fx| {
        let (c, t) = opened(fx)?;
        let w = fx.session(&c[1]);
        let waiter = std::thread::spawn(move || {
            let started = Instant::now();
            (
                w.wait_for_mentions(None, Some(FIXTURE_WAIT_MAX_MS)),
                started.elapsed(),
            )
        });
        std::thread::sleep(Duration::from_millis(30));
        let m = ok(send(fx, &c[0], &t, "@web now"), "send")?;
        let (got, took) = waiter.join().map_err(|_| "waiter panicked".to_owned())?;
        let got = ok(got, "wait")?;
        ensure(got == [m], || format!("woke after {took:?} with {got:?}"))
    }),
    ("wait_for_mentions/concurrent_waits_split_delivery", |fx| {
        let (c, t) = opened(fx)?;
        let waiters: Vec<_> = (0..2)
            .map(|_| {
                let w = fx.session(&c[1]);
                std::thread::spawn(move || w.wait_for_mentions(None, Some(100)))
            })
            .collect();
        std::thread::sleep(Duration::from_millis(20));
        let m = ok(send(fx, &c[0], &t, "@web one"), "send")?;
        let mut seen = Vec::new();
        for h in waiters {
            seen.extend(ok(
                h.join().map_err(|_| "waiter panicked".to_owned())?,
                "wait",
            )?);
        }
        seen.extend(ok(
            fx.session(&c[1]).wait_for_mentions(None, Some(0)),
            "wait",
        )?);
        ensure(seen == [m], || format!("delivered {} times", seen.len()))
    }),
    ("wait_for_mentions/unknown_thread_filter", |fx| {
        let c = cast(fx)?;
        code(
            fx.session(&c[1])
                .wait_for_mentions(Some(&bogus_thread()), Some(0)),
            "UNKNOWN_THREAD",
        )
        .map(drop)
    }),
    ("wait_for_mentions/unregistered_agent", |fx| {
        cast(fx)?;
        match fx.unregistered(&id("ghost")) {
            Ok(s) => code(s.wait_for_mentions(None, Some(0)), "UNKNOWN_AGENT").map(drop),
            Err(e) => code::<()>(Err(e), "HELLO_REJECTED").map(drop),
        }
    }),
    ("wait_for_mentions/drains_closed_thread", |fx| {
        let (c, t) = opened(fx)?;
        let m = ok(send(fx, &c[0], &t, "@web before close"), "send")?;
        ok(fx.session(&c[0]).close_thread(&t, "done"), "close_thread")?;
        let got = ok(fx.session(&c[1]).wait_for_mentions(None, Some(0)), "wait")?;
        ensure(got == [m], || format!("delivered {got:?}"))
    }),
    ("close_thread/appends_system_message", |fx| {
        let (c, t) = opened(fx)?;
        ok(send(fx, &c[1], &t, "hello"), "send")?;
        ok(
            fx.session(&c[1]).close_thread(&t, "answer submitted: 2732"),
            "close_thread",
        )?;
        let tr = ok(fx.session(&c[0]).get_transcript(&t), "get_transcript")?;
        let last = tr.messages.last().ok_or("no messages")?;
        ensure(
            tr.header.status == ThreadStatus::Closed
                && tr.header.summary.as_deref() == Some("answer submitted: 2732")
                && last.seq == 2
                && last.kind == MessageKind::System
                && last.sender == c[1]
                && last.body == "closed: answer submitted: 2732",
            || format!("header {:?}, last {last:?}", tr.header),
        )
    }),
    ("close_thread/empty_summary", |fx| {
        let (c, t) = opened(fx)?;
        ok(fx.session(&c[0]).close_thread(&t, ""), "close_thread")?;
        let tr = ok(fx.session(&c[0]).get_transcript(&t), "get_transcript")?;
        ensure(tr.header.summary.as_deref() == Some(""), || {
            format!("summary {:?}", tr.header.summary)
        })
    }),
    ("close_thread/double_close", |fx| {
        let (c, t) = closed(fx)?;
        code(fx.session(&c[1]).close_thread(&t, "again"), "THREAD_CLOSED").map(drop)
    }),
    ("close_thread/unknown_thread", |fx| {
        let c = cast(fx)?;
        code(
            fx.session(&c[0]).close_thread(&bogus_thread(), "x"),
            "UNKNOWN_THREAD",
        )
        .map(drop)
    }),
    ("close_thread/caller_not_participant", |fx| {
        let (c, t) = opened(fx)?;
        code(fx.session(&c[3]).close_thread(&t, "x"), "NOT_PARTICIPANT").map(drop)
    }),
    ("get_transcript/fresh_thread", |fx| {
        let (c, t) = opened(fx)?;
        let tr = ok(fx.session(&c[0]).get_transcript(&t), "get_transcript")?;
        ensure(tr.messages.is_empty() && tr.header.thread == t, || {
            format!("{tr:?}")
        })
    }),
    ("get_transcript/matches_sends", |fx| {
        let (c, t) = opened(fx)?;
        let mut sent = Vec::new();
        for i in 0..5 {
            sent.push(ok(send(fx, &c[i % 3], &t, &format!("m{i}")), "send")?);
        }
        let tr = ok(fx.session(&c[1]).get_transcript(&t), "get_transcript")?;
        ensure(tr.messages == sent && tr.is_gap_free(), || {
            format!("{:?}", tr.messages)
        })
    }),
    ("get_transcript/readable_by_non_participant", |fx| {
        let (c, t) = opened(fx)?;
        ok(send(fx, &c[0], &t, "x"), "send")?;
        let tr = ok(fx.session(&c[3]).get_transcript(&t), "get_transcript")?;
        ensure(tr.messages.len() == 1, || {
            format!("{} messages", tr.messages.len())
        })
    }),
    ("get_transcript/unknown_thread", |fx| {
        let c = cast(fx)?;
        code(
            fx.session(&c[0]).get_transcript(&bogus_thread()),
            "UNKNOWN_THREAD",
        )
        .map(drop)
    }),
    ("get_transcript/closed_is_stable", |fx| {
        let (c, t) = opened(fx)?;
        ok(send(fx, &c[0], &t, "@web x"), "send")?;
        ok(fx.session(&c[0]).close_thread(&t, "done"), "close_thread")?;
        let a = ok(fx.session(&c[0]).get_transcript(&t), "get_transcript")?;
        ok(fx.session(&c[1]).wait_for_mentions(None, Some(0)), "wait")?;
        let _ = send(fx, &c[1], &t, "too late");
        let b = ok(fx.session(&c[2]).get_transcript(&t), "get_transcript")?;
        ensure(a == b, || "closed transcript changed between reads".into())
    }),
];
