//! Acceptance gate: eight criteria, each with a runtime limit.
//!
//! One line per criterion goes straight to stderr so it shows even when the
//! harness captures test output. A criterion passes only if its check holds
//! and it finished inside its limit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use coral_a2a::client::{A2aApi, Session};
use coral_a2a::harness::conformance::{run_conformance, LocalTarget, TcpTarget};
use coral_a2a::harness::generate::{random_scenario, termination_violations};
use coral_a2a::harness::{load_scenario, run_scenario, RunReport, Scenario, TICK_CEILING};
use coral_a2a::model::{
    encode_transcript, AgentId, AgentRegistration, Message, MessageKind, Role, ThreadId,
};
use coral_a2a::orchestration::consensus::{
    decide_consensus, ConsensusMode, ConsensusOutcome, ConsensusPolicy, Fraction, Vote,
};
use coral_a2a::server::tcp::TcpServer;
use coral_a2a::server::{Server, ServerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(cond: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

fn fixture(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    load_scenario(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn messages(r: &RunReport) -> &[Message] {
    r.transcript
        .as_ref()
        .map(|t| t.messages.as_slice())
        .unwrap_or_default()
}

/// Criterion 1: every contract case passes on both targets.
fn conformance() -> Check {
    let mut total = 0;
    for report in [run_conformance(&LocalTarget), run_conformance(&TcpTarget)] {
        let failed: Vec<String> = report
            .failures()
            .map(|c| format!("{} ({})", c.name, c.detail.clone().unwrap_or_default()))
            .collect();
        ensure(failed.is_empty(), || {
            format!("{}: {}", report.target, failed.join("; "))
        })?;
        for primitive in [
            "list_agents",
            "create_thread",
            "add_participant",
            "remove_participant",
            "send_message",
            "wait_for_mentions",
            "close_thread",
        ] {
            let n = report
                .cases
                .iter()
                .filter(|c| c.name.starts_with(&format!("{primitive}/")))
                .count();
            ensure(n >= 3, || {
                format!("{}: only {n} cases for {primitive}", report.target)
            })?;
        }
        total += report.cases.len();
    }
    Ok(format!("{total} cases over local and tcp"))
}

/// Criterion 2: 16 senders x 1000 messages into one thread over TCP, with
/// concurrent receivers draining mentions.
fn ordering_under_concurrency() -> Check {
    const SENDERS: usize = 16;
    const PER_SENDER: usize = 1000;
    const RECEIVERS: usize = 4;
    let server = Server::new(ServerConfig::default()).map_err(|e| e.to_string())?;
    let mut tcp = TcpServer::bind(server, "127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = tcp.local_addr().to_string();
    let connect = |name: &str| Session::connect(&addr, &AgentId::new(name).unwrap(), None).unwrap();

    let senders: Vec<Session> = (0..SENDERS).map(|i| connect(&format!("s{i}"))).collect();
    let receivers: Vec<Session> = (0..RECEIVERS).map(|i| connect(&format!("r{i}"))).collect();
    let members: Vec<AgentId> = senders
        .iter()
        .chain(&receivers)
        .map(|s| s.agent().clone())
        .collect();
    let thread = senders[0]
        .create_thread(&members)
        .map_err(|e| e.to_string())?;

    let done = Arc::new(AtomicBool::new(false));
    let delivered: Arc<Mutex<Vec<(AgentId, u64)>>> = Arc::default();
    let mut waiters = Vec::new();
    for r in &receivers {
        // Two concurrent waits per receiver on one session.
        for _ in 0..2 {
            let (r, done, delivered, thread) =
                (r.clone(), done.clone(), delivered.clone(), thread.clone());
            waiters.push(std::thread::spawn(move || loop {
                let got = r.wait_for_mentions(Some(&thread), Some(50)).expect("wait");
                let empty = got.is_empty();
                delivered
                    .lock()
                    .unwrap()
                    .extend(got.into_iter().map(|m| (r.agent().clone(), m.seq)));
                if empty && done.load(Ordering::SeqCst) {
                    break;
                }
            }));
        }
    }

    let sent: Vec<Vec<Message>> = std::thread::scope(|scope| {
        let handles: Vec<_> = senders
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let thread = &thread;
                let receivers = &receivers;
                scope.spawn(move || {
                    (0..PER_SENDER)
                        .map(|j| {
                            let k = i * PER_SENDER + j;
                            let mut to = vec![receivers[k % RECEIVERS].agent().clone()];
                            if k.is_multiple_of(7) {
                                to.push(receivers[(k + 1) % RECEIVERS].agent().clone());
                            }
                            s.send_message(thread, MessageKind::Chat, &format!("m{k}"), &to)
                                .expect("send")
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let obligations: BTreeSet<(AgentId, u64)> = sent
        .iter()
        .flatten()
        .flat_map(|m| m.mentions.iter().map(move |a| (a.clone(), m.seq)))
        .collect();
    let deadline = Instant::now() + Duration::from_secs(30);
    while delivered.lock().unwrap().len() < obligations.len() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    done.store(true, Ordering::SeqCst);
    for w in waiters {
        w.join().map_err(|_| "waiter panicked".to_owned())?;
    }

    let returned: BTreeSet<u64> = sent.iter().flatten().map(|m| m.seq).collect();
    let total = (SENDERS * PER_SENDER) as u64;
    ensure(returned == (1..=total).collect(), || {
        format!("{} distinct seqs returned", returned.len())
    })?;
    let stored: Vec<u64> = senders[0]
        .get_transcript(&thread)
        .map_err(|e| e.to_string())?
        .messages
        .iter()
        .map(|m| m.seq)
        .collect();
    ensure(stored == (1..=total).collect::<Vec<_>>(), || {
        "stored seqs are not 1..N".into()
    })?;
    let delivered = delivered.lock().unwrap().clone();
    let distinct: BTreeSet<(AgentId, u64)> = delivered.iter().cloned().collect();
    ensure(distinct.len() == delivered.len(), || {
        format!("{} duplicate deliveries", delivered.len() - distinct.len())
    })?;
    ensure(distinct == obligations, || {
        format!(
            "delivered {} of {} mention obligations",
            distinct.len(),
            obligations.len()
        )
    })?;
    for s in senders.iter().chain(&receivers) {
        s.close();
    }
    tcp.shutdown();
    Ok(format!(
        "{total} seqs dense, {} mention obligations delivered once",
        obligations.len()
    ))
}

/// Criterion 3: the consensus rule against brute-force enumeration.
fn consensus_oracle() -> Check {
    #[derive(Clone, Copy, PartialEq)]
    enum Cast {
        Approve,
        Reject,
        Silent,
    }
    let mut checked = 0u64;
    for polled in 0..=5usize {
        // Every assignment of {approve, reject, silent} to the polled agents
        // covers every vote multiset, in every order.
        for code in 0..3usize.pow(polled as u32) {
            let casts: Vec<Cast> = (0..polled)
                .map(|i| match (code / 3usize.pow(i as u32)) % 3 {
                    0 => Cast::Approve,
                    1 => Cast::Reject,
                    _ => Cast::Silent,
                })
                .collect();
            let votes: Vec<Vote> = casts
                .iter()
                .filter_map(|c| match c {
                    Cast::Approve => Some(Vote::Approve),
                    Cast::Reject => Some(Vote::Reject),
                    Cast::Silent => None,
                })
                .collect();
            let approvals = casts.iter().filter(|c| **c == Cast::Approve).count();
            let rejections = casts.iter().filter(|c| **c == Cast::Reject).count();
            for den in 1..=6u32 {
                for num in 0..=den {
                    // Smallest count q with q / polled >= num / den.
                    let quorum = (0..=polled)
                        .find(|q| *q as u32 * den >= num * polled as u32)
                        .unwrap();
                    for mode in [ConsensusMode::UnanimousQuorum, ConsensusMode::Majority] {
                        let rule = match mode {
                            ConsensusMode::UnanimousQuorum => rejections == 0,
                            ConsensusMode::Majority => approvals > rejections,
                        };
                        let want = rule && approvals + rejections >= quorum;
                        let policy = ConsensusPolicy {
                            mode,
                            quorum_fraction: Fraction::new(num, den).unwrap(),
                        };
                        let got = decide_consensus(&votes, polled, policy);
                        ensure(
                            (got.outcome == ConsensusOutcome::Accepted) == want
                                && got.quorum == quorum,
                            || {
                                format!("mismatch: polled {polled}, votes {votes:?}, {num}/{den}, {mode:?}: {got:?}")
                            },
                        )?;
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!(
        "{checked} (votes, polled, policy) cases, zero mismatches"
    ))
}

/// Index of the first message at or after `from` satisfying `p`.
fn next(ms: &[Message], from: usize, p: impl Fn(&Message) -> bool) -> Option<usize> {
    ms[from..].iter().position(p).map(|i| from + i)
}

/// Criterion 4: the edit-count dialogue, three runs.
fn wiki_edits() -> Check {
    let s = fixture("wiki_edits.json");
    let runs: Vec<RunReport> = (0..3).map(|_| run_scenario(&s, None).unwrap()).collect();
    let r = &runs[0];
    ensure(r.outcome == "submitted", || {
        format!("outcome {}", r.outcome)
    })?;
    ensure(r.answer.as_deref() == Some("2732"), || {
        format!("answer {:?}", r.answer)
    })?;
    let bytes: Vec<Vec<u8>> = runs
        .iter()
        .map(|r| encode_transcript(messages(r)))
        .collect();
    ensure(bytes.iter().all(|b| *b == bytes[0]), || {
        "transcripts differ across runs".into()
    })?;
    ensure(
        runs.iter()
            .all(|x| x.transcript_sha256 == r.transcript_sha256),
        || "hashes differ".into(),
    )?;

    let ms = messages(r);
    let planner = AgentId::new("planner").unwrap();
    let plan = next(ms, 0, |m| {
        m.kind == MessageKind::Plan && m.sender == planner
    })
    .ok_or("no plan")?;
    let result =
        next(ms, plan + 1, |m| m.kind == MessageKind::Result).ok_or("no result after plan")?;
    let accept = next(ms, result + 1, |m| {
        m.kind == MessageKind::Critique && m.body.starts_with("accept")
    })
    .ok_or("no accept critique after result")?;
    let cand = next(ms, accept + 1, |m| m.kind == MessageKind::Candidate).ok_or("no candidate")?;
    let sub = next(ms, cand + 1, |m| m.kind == MessageKind::Submission).ok_or("no submission")?;
    // Polled agents are those the candidate addresses.
    let polled: BTreeSet<&AgentId> = ms[cand].mentions.iter().collect();
    let approvers: BTreeSet<&AgentId> = ms[cand + 1..sub]
        .iter()
        .filter(|m| {
            m.kind == MessageKind::Vote && m.body == "approve" && polled.contains(&m.sender)
        })
        .map(|m| &m.sender)
        .collect();
    let f = s.limits.consensus_policy.quorum_fraction;
    let quorum = (0..=polled.len())
        .find(|q| *q as u32 * f.den() >= f.num() * polled.len() as u32)
        .unwrap();
    ensure(approvers.len() >= quorum, || {
        format!("{} approvals, quorum {quorum}", approvers.len())
    })?;
    ensure(ms[sub].body == "2732", || {
        format!("submission {:?}", ms[sub].body)
    })?;
    Ok(format!(
        "plan #{} result #{} accept #{} candidate #{} {}/{} approvals submission #{}; 3 runs hash-equal",
        ms[plan].seq,
        ms[result].seq,
        ms[accept].seq,
        ms[cand].seq,
        approvers.len(),
        polled.len(),
        ms[sub].seq
    ))
}

fn plans(r: &RunReport) -> Vec<Value> {
    messages(r)
        .iter()
        .filter(|m| m.kind == MessageKind::Plan && m.sender.as_str() == "planner")
        .map(|m| serde_json::from_str(&m.body).expect("plan body is json"))
        .collect()
}

/// Criterion 5: a permanently busy web agent ends in a give-up.
fn busy_web() -> Check {
    let mut out = Vec::new();
    for name in ["busy_web.json", "crocodiles_giveup.json"] {
        let s = fixture(name);
        let r = run_scenario(&s, None).unwrap();
        ensure(
            !r.violations.iter().any(|v| v.starts_with("termination")),
            || format!("{name}: hang"),
        )?;
        ensure(r.outcome == "gave_up", || {
            format!("{name}: outcome {}", r.outcome)
        })?;
        let answer = r.answer.clone().unwrap_or_default();
        ensure(answer.starts_with("give up: "), || {
            format!("{name}: answer {answer:?}")
        })?;
        let versions = plans(&r).len() as u32;
        ensure(versions <= s.limits.max_rounds + 1, || {
            format!(
                "{name}: {versions} plan versions, max_rounds {}",
                s.limits.max_rounds
            )
        })?;
        let web_spoke = messages(&r)
            .iter()
            .any(|m| m.sender.as_str() == "web" && m.kind == MessageKind::Result);
        ensure(!web_spoke, || format!("{name}: web produced a result"))?;
        out.push(format!("{name} gave up (plan versions: {versions})"));
    }
    Ok(out.join(", "))
}

fn allocated(plan: &Value, worker: &str) -> BTreeSet<String> {
    plan["allocation"][worker]
        .as_array()
        .map(|a| {
            a.iter()
                .filter_map(|s| s.as_str().map(str::to_owned))
                .collect()
        })
        .unwrap_or_default()
}

/// Criterion 6: the silent worker's steps move elsewhere and the run submits.
fn bypass() -> Check {
    let r = run_scenario(&fixture("bypass_reassign.json"), None).unwrap();
    ensure(r.outcome == "submitted", || {
        format!("outcome {}", r.outcome)
    })?;
    let ps = plans(&r);
    let (first, last) = (ps.first().ok_or("no plan")?, ps.last().unwrap());
    let orphaned = allocated(first, "web");
    ensure(!orphaned.is_empty(), || {
        "web was never allocated a step".into()
    })?;
    ensure(allocated(last, "web").is_empty(), || {
        format!("final plan still gives web {:?}", allocated(last, "web"))
    })?;
    let workers = last["allocation"]
        .as_object()
        .ok_or("allocation is not an object")?;
    let covered: BTreeSet<String> = workers.keys().flat_map(|w| allocated(last, w)).collect();
    ensure(orphaned.is_subset(&covered), || {
        format!("steps {orphaned:?} not reassigned")
    })?;
    let silent = !messages(&r).iter().any(|m| m.sender.as_str() == "web");
    ensure(silent, || "web was expected to stay silent".into())?;
    Ok(format!(
        "web steps {orphaned:?} reassigned over {} plan versions, answer {:?}",
        ps.len(),
        r.answer
    ))
}

/// Criterion 7: 100 random threads survive a restart byte for byte.
fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ServerConfig {
        persistence_dir: Some(dir.path().to_owned()),
        id_seed: Some(77),
        ..ServerConfig::default()
    };
    let names: Vec<AgentId> = (0..6)
        .map(|i| AgentId::new(&format!("agent{i}")).unwrap())
        .collect();
    let server = Server::new(config.clone()).map_err(|e| e.to_string())?;
    for a in &names {
        server
            .register_agent(AgentRegistration::new(
                a.clone(),
                format!("{a} worker"),
                Role::Worker,
            ))
            .map_err(|e| e.to_string())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ids: Vec<ThreadId> = Vec::new();
    for _ in 0..100 {
        let creator = &names[rng.gen_range(0..names.len())];
        let invited: Vec<AgentId> = names
            .iter()
            .filter(|_| rng.gen_bool(0.4))
            .cloned()
            .collect();
        let t = server
            .create_thread(creator, &invited)
            .map_err(|e| e.to_string())?;
        for _ in 0..rng.gen_range(0..40) {
            let members = server
                .get_transcript(&t)
                .map_err(|e| e.to_string())?
                .header
                .participants;
            let Some(who) = members.get(rng.gen_range(0..members.len().max(1))).cloned() else {
                break;
            };
            let other = &names[rng.gen_range(0..names.len())];
            // Rejections (outsiders, closed threads) are part of the workload.
            let _ = match rng.gen_range(0..20) {
                0 | 1 => server.add_participant(&t, &who, other),
                2 => server.remove_participant(&t, &who, other),
                3 => server.close_thread(&t, &who, "finished"),
                _ => {
                    let to = &members[rng.gen_range(0..members.len())];
                    let body = format!("note {} for @{to} ✓", rng.gen::<u32>());
                    server
                        .send_message(&t, &who, MessageKind::Chat, &body, &[])
                        .map(|_| ())
                }
            };
        }
        ids.push(t);
    }
    server.sync().map_err(|e| e.to_string())?;
    let before: BTreeMap<ThreadId, (Vec<u8>, String)> = ids
        .iter()
        .map(|t| {
            let tr = server.get_transcript(t).unwrap();
            (
                t.clone(),
                (encode_transcript(&tr.messages), format!("{:?}", tr.header)),
            )
        })
        .collect();
    let total: usize = ids
        .iter()
        .map(|t| server.get_transcript(t).unwrap().messages.len())
        .sum();
    drop(server);

    let restarted = Server::new(config).map_err(|e| e.to_string())?;
    ensure(restarted.thread_ids().len() == 100, || {
        format!("{} threads restored", restarted.thread_ids().len())
    })?;
    for (t, (bytes, header)) in &before {
        let tr = restarted.get_transcript(t).map_err(|e| e.to_string())?;
        ensure(encode_transcript(&tr.messages) == *bytes, || {
            format!("thread {t}: transcript differs")
        })?;
        ensure(format!("{:?}", tr.header) == *header, || {
            format!("thread {t}: header differs")
        })?;
    }
    Ok(format!(
        "100 threads, {total} messages identical after restart"
    ))
}

/// Criterion 8: 200 generated scenarios all terminate within bounds.
fn termination() -> Check {
    let mut outcomes: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..200u64 {
        let s = random_scenario(seed);
        let r = run_scenario(&s, None).map_err(|e| format!("seed {seed}: {e}"))?;
        let v = termination_violations(&r, &s);
        ensure(v.is_empty(), || format!("seed {seed}: {v:?}"))?;
        ensure(r.ticks < TICK_CEILING, || {
            format!("seed {seed}: reached the tick ceiling")
        })?;
        *outcomes.entry(r.outcome).or_default() += 1;
    }
    Ok(format!(
        "200 scenarios terminated: {outcomes:?}, ceiling {TICK_CEILING} ticks"
    ))
}

#[test]
fn acceptance_criteria() {
    type Criterion = (u32, &'static str, u64, fn() -> Check);
    let criteria: [Criterion; 8] = [
        (1, "protocol conformance", 10, conformance),
        (
            2,
            "ordering under concurrency",
            60,
            ordering_under_concurrency,
        ),
        (3, "consensus oracle equivalence", 5, consensus_oracle),
        (4, "wiki_edits dialogue", 5, wiki_edits),
        (5, "busy web gives up", 5, busy_web),
        (6, "bypass soundness", 5, bypass),
        (7, "persistence replay", 30, persistence),
        (8, "termination", 120, termination),
    ];
    let mut failed = Vec::new();
    for (n, title, limit, check) in criteria {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        let (verdict, detail) = match result {
            Ok(d) if secs <= limit as f64 => ("PASS", d),
            Ok(d) => ("FAIL", format!("over the {limit} s limit; {d}")),
            Err(e) => ("FAIL", e),
        };
        if verdict == "FAIL" {
            failed.push(n);
        }
        let line =
            format!("criterion {n} {verdict} {title} ({secs:.2} s of {limit} s): {detail}\n");
        let _ = std::io::stderr().lock().write_all(line.as_bytes());
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
