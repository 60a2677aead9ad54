//! Server invariants under random operation sequences, checked against a
//! plain reference model of membership, status, sequence counters and
//! pending mentions.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use coral_a2a::model::{
    encode_transcript, AgentId, AgentRegistration, MessageKind, Role, ThreadId,
};
use coral_a2a::server::{Server, ServerConfig};
use coral_a2a::ErrorCode;
use proptest::prelude::*;

const AGENTS: usize = 5;

fn agent(i: usize) -> AgentId {
    AgentId::new(&format!("a{i}")).unwrap()
}

#[derive(Debug, Clone)]
enum Op {
    Create {
        creator: usize,
        members: Vec<usize>,
    },
    Add {
        thread: usize,
        caller: usize,
        agent: usize,
    },
    Remove {
        thread: usize,
        caller: usize,
        agent: usize,
    },
    Send {
        thread: usize,
        sender: usize,
        mentions: Vec<usize>,
    },
    Wait {
        agent: usize,
    },
    Close {
        thread: usize,
        caller: usize,
    },
}

fn op() -> impl Strategy<Value = Op> {
    let a = 0..AGENTS;
    let t = 0..8usize;
    let some = proptest::collection::vec(0..AGENTS, 0..4);
    prop_oneof![
        1 => (a.clone(), some.clone()).prop_map(|(creator, members)| Op::Create { creator, members }),
        2 => (t.clone(), a.clone(), a.clone()).prop_map(|(thread, caller, agent)| Op::Add { thread, caller, agent }),
        1 => (t.clone(), a.clone(), a.clone()).prop_map(|(thread, caller, agent)| Op::Remove { thread, caller, agent }),
        6 => (t.clone(), a.clone(), some).prop_map(|(thread, sender, mentions)| Op::Send { thread, sender, mentions }),
        3 => a.clone().prop_map(|agent| Op::Wait { agent }),
        1 => (t, a).prop_map(|(thread, caller)| Op::Close { thread, caller }),
    ]
}

struct ModelThread {
    id: ThreadId,
    members: BTreeSet<usize>,
    closed: bool,
    len: u64,
    /// Canonical bytes captured at close.
    frozen: Option<Vec<u8>>,
}

#[derive(Default)]
struct Model {
    threads: Vec<ModelThread>,
    pending: BTreeMap<usize, BTreeSet<(ThreadId, u64)>>,
}

impl Model {
    fn gate(&self, t: usize, caller: usize) -> Result<(), ErrorCode> {
        let th = &self.threads[t];
        if th.closed {
            Err(ErrorCode::ThreadClosed)
        } else if !th.members.contains(&caller) {
            Err(ErrorCode::NotParticipant)
        } else {
            Ok(())
        }
    }

    fn drop_pending(&mut self, agent: usize, t: usize) {
        let id = self.threads[t].id.clone();
        if let Some(p) = self.pending.get_mut(&agent) {
            p.retain(|(th, _)| *th != id);
        }
    }
}

fn server(dir: &std::path::Path) -> Arc<Server> {
    Server::new(ServerConfig {
        id_seed: Some(9),
        persistence_dir: Some(dir.to_owned()),
        ..ServerConfig::default()
    })
    .unwrap()
}

fn code<T>(r: coral_a2a::ProtocolResult<T>) -> Result<T, ErrorCode> {
    r.map_err(|e| e.code)
}

fn run(ops: Vec<Op>) -> Result<(), TestCaseError> {
    let dir = tempfile::tempdir().unwrap();
    let s = server(dir.path());
    for i in 0..AGENTS {
        s.register_agent(AgentRegistration::new(
            agent(i),
            format!("agent {i}"),
            Role::Worker,
        ))
        .unwrap();
    }
    let mut m = Model::default();
    let mut delivered: BTreeMap<usize, Vec<(ThreadId, u64)>> = BTreeMap::new();

    for op in ops {
        match op {
            Op::Create { creator, members } => {
                let ids: Vec<AgentId> = members.iter().map(|&i| agent(i)).collect();
                let id = s.create_thread(&agent(creator), &ids).unwrap();
                let mut set: BTreeSet<usize> = members.into_iter().collect();
                set.insert(creator);
                m.threads.push(ModelThread {
                    id,
                    members: set,
                    closed: false,
                    len: 0,
                    frozen: None,
                });
            }
            Op::Add {
                thread,
                caller,
                agent: who,
            } if thread < m.threads.len() => {
                let got =
                    code(s.add_participant(&m.threads[thread].id, &agent(caller), &agent(who)));
                let want = m.gate(thread, caller);
                prop_assert_eq!(&got, &want);
                if want.is_ok() && m.threads[thread].members.insert(who) {
                    m.drop_pending(who, thread);
                }
            }
            Op::Remove {
                thread,
                caller,
                agent: who,
            } if thread < m.threads.len() => {
                let got =
                    code(s.remove_participant(&m.threads[thread].id, &agent(caller), &agent(who)));
                let want = m.gate(thread, caller);
                prop_assert_eq!(&got, &want);
                if want.is_ok() && m.threads[thread].members.remove(&who) {
                    m.drop_pending(who, thread);
                    if m.threads[thread].members.is_empty() {
                        m.threads[thread].closed = true;
                        m.threads[thread].len += 1;
                    }
                }
            }
            Op::Send {
                thread,
                sender,
                mentions,
            } if thread < m.threads.len() => {
                let ids: Vec<AgentId> = mentions.iter().map(|&i| agent(i)).collect();
                let got = code(s.send_message(
                    &m.threads[thread].id,
                    &agent(sender),
                    MessageKind::Chat,
                    "note",
                    &ids,
                ));
                let targets: BTreeSet<usize> =
                    mentions.into_iter().filter(|&i| i != sender).collect();
                let want = m.gate(thread, sender).and_then(|_| {
                    if targets
                        .iter()
                        .all(|i| m.threads[thread].members.contains(i))
                    {
                        Ok(())
                    } else {
                        Err(ErrorCode::MentionNotParticipant)
                    }
                });
                prop_assert_eq!(got.as_ref().err(), want.as_ref().err());
                if let Ok(msg) = got {
                    let th = &mut m.threads[thread];
                    th.len += 1;
                    prop_assert_eq!(msg.seq, th.len);
                    for i in targets {
                        m.pending
                            .entry(i)
                            .or_default()
                            .insert((th.id.clone(), msg.seq));
                    }
                }
            }
            Op::Wait { agent: who } => {
                let got: Vec<(ThreadId, u64)> = s
                    .wait_for_mentions(&agent(who), None, Some(0))
                    .unwrap()
                    .into_iter()
                    .map(|msg| (msg.thread, msg.seq))
                    .collect();
                let want: Vec<(ThreadId, u64)> = std::mem::take(m.pending.entry(who).or_default())
                    .into_iter()
                    .collect();
                prop_assert_eq!(&got, &want);
                delivered.entry(who).or_default().extend(got);
            }
            Op::Close { thread, caller } if thread < m.threads.len() => {
                let got = code(s.close_thread(&m.threads[thread].id, &agent(caller), "done"));
                let want = m.gate(thread, caller);
                prop_assert_eq!(&got, &want);
                if want.is_ok() {
                    m.threads[thread].closed = true;
                    m.threads[thread].len += 1;
                }
            }
            _ => {}
        }
        for th in &mut m.threads {
            let tr = s.get_transcript(&th.id).unwrap();
            let seqs: Vec<u64> = tr.messages.iter().map(|x| x.seq).collect();
            prop_assert_eq!(seqs, (1..=th.len).collect::<Vec<_>>());
            let members: BTreeSet<AgentId> = th.members.iter().map(|&i| agent(i)).collect();
            prop_assert_eq!(
                tr.header
                    .participants
                    .iter()
                    .cloned()
                    .collect::<BTreeSet<_>>(),
                members
            );
            if th.closed {
                let bytes = encode_transcript(&tr.messages);
                let frozen = th.frozen.get_or_insert_with(|| bytes.clone());
                prop_assert_eq!(&bytes, frozen);
            }
        }
    }

    for (who, got) in &delivered {
        let distinct: BTreeSet<_> = got.iter().collect();
        prop_assert_eq!(
            distinct.len(),
            got.len(),
            "agent a{} got a mention twice",
            who
        );
    }
    prop_assert_eq!(s.audit().regressions(), 0);

    s.sync().unwrap();
    let before: Vec<_> = m
        .threads
        .iter()
        .map(|t| s.get_transcript(&t.id).unwrap())
        .collect();
    drop(s);
    let restarted = server(dir.path());
    prop_assert_eq!(restarted.list_agents().len(), AGENTS);
    for old in before {
        let new = restarted.get_transcript(&old.header.thread).unwrap();
        prop_assert_eq!(
            encode_transcript(&new.messages),
            encode_transcript(&old.messages)
        );
        prop_assert_eq!(new.header, old.header);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, ..ProptestConfig::default() })]

    #[test]
    fn server_matches_reference_model(ops in proptest::collection::vec(op(), 1..80)) {
        run(ops)?;
    }
}
