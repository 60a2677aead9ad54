//! Append-only JSONL persistence: one `<thread>.jsonl` file per thread plus
//! an `agents.jsonl` registry log.
//!
//! A thread file starts with a header line, followed by canonical message
//! encodings interleaved with bookkeeping event lines (participant changes
//! and the close record). Bookkeeping lines are the only lines carrying an
//! `"event"` key.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{decode_message, AgentId, AgentRegistration, Message, ThreadId, ThreadStatus};

pub const AGENTS_FILE: &str = "agents.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record in {path} line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreadFileHeader {
    pub thread: ThreadId,
    pub creator: AgentId,
    pub participants: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThreadEvent {
    ParticipantAdded {
        agent: AgentId,
        by: AgentId,
        ts_ms: u64,
    },
    ParticipantRemoved {
        agent: AgentId,
        by: AgentId,
        ts_ms: u64,
    },
    Closed {
        summary: String,
        by: AgentId,
        ts_ms: u64,
    },
}

/// One line of a thread file after the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ThreadLine {
    Message(Message),
    Event(ThreadEvent),
}

pub fn thread_path(dir: &Path, id: &ThreadId) -> PathBuf {
    dir.join(format!("{id}.jsonl"))
}

fn json_line<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec(value).expect("record serializes");
    out.push(b'\n');
    out
}

pub fn encode_header(h: &ThreadFileHeader) -> Vec<u8> {
    json_line(h)
}

pub fn encode_event(e: &ThreadEvent) -> Vec<u8> {
    json_line(e)
}

/// Open append handle for one thread file.
#[derive(Debug)]
pub struct ThreadLog {
    path: PathBuf,
    file: File,
}

impl ThreadLog {
    pub fn create(dir: &Path, header: &ThreadFileHeader) -> Result<Self, PersistError> {
        let path = thread_path(dir, &header.thread);
        let mut file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.write_all(&encode_header(header))
            .map_err(io_err(&path))?;
        Ok(Self { path, file })
    }

    pub fn reopen(path: PathBuf) -> Result<Self, PersistError> {
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, line: &[u8]) -> Result<(), PersistError> {
        self.file.write_all(line).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }

    pub fn sync(&self) -> Result<(), PersistError> {
        self.file.sync_data().map_err(io_err(&self.path))
    }
}

/// Thread state rebuilt from a file.
#[derive(Debug, Clone)]
pub struct LoadedThread {
    pub header: ThreadFileHeader,
    pub participants: BTreeSet<AgentId>,
    pub status: ThreadStatus,
    pub summary: Option<String>,
    pub messages: Vec<Message>,
    pub path: PathBuf,
}

pub fn parse_thread_line(text: &str) -> Result<ThreadLine, String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if value.get("event").is_some() {
        serde_json::from_value(value)
            .map(ThreadLine::Event)
            .map_err(|e| e.to_string())
    } else {
        decode_message(text.as_bytes())
            .map(ThreadLine::Message)
            .map_err(|e| e.to_string())
    }
}

pub fn load_thread(path: &Path) -> Result<LoadedThread, PersistError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |line: usize, reason: String| PersistError::Corrupt {
        path: path.to_owned(),
        line,
        reason,
    };
    let mut lines: Vec<&[u8]> = bytes.split_inclusive(|&b| b == b'\n').collect();
    if let Some(last) = lines.last() {
        if !last.ends_with(b"\n") {
            tracing::warn!(path = %path.display(), "ignoring torn trailing record");
            lines.pop();
        }
    }
    let mut iter = lines.into_iter().enumerate();
    let (_, first) = iter.next().ok_or_else(|| corrupt(1, "empty file".into()))?;
    let header: ThreadFileHeader =
        serde_json::from_slice(first).map_err(|e| corrupt(1, e.to_string()))?;
    let mut participants: BTreeSet<AgentId> = header.participants.iter().cloned().collect();
    let mut status = ThreadStatus::Open;
    let mut summary = None;
    let mut messages: Vec<Message> = Vec::new();
    for (i, raw) in iter {
        let text = std::str::from_utf8(raw)
            .map_err(|e| corrupt(i + 1, e.to_string()))?
            .trim_end_matches('\n');
        match parse_thread_line(text).map_err(|e| corrupt(i + 1, e))? {
            ThreadLine::Message(m) => {
                if m.seq != messages.len() as u64 + 1 {
                    return Err(corrupt(i + 1, format!("sequence gap at seq {}", m.seq)));
                }
                if m.thread != header.thread {
                    return Err(corrupt(i + 1, "message belongs to another thread".into()));
                }
                messages.push(m);
            }
            ThreadLine::Event(ThreadEvent::ParticipantAdded { agent, .. }) => {
                participants.insert(agent);
            }
            ThreadLine::Event(ThreadEvent::ParticipantRemoved { agent, .. }) => {
                participants.remove(&agent);
            }
            ThreadLine::Event(ThreadEvent::Closed { summary: s, .. }) => {
                status = ThreadStatus::Closed;
                summary = Some(s);
            }
        }
    }
    Ok(LoadedThread {
        header,
        participants,
        status,
        summary,
        messages,
        path: path.to_owned(),
    })
}

/// Loads every thread file in `dir`, ordered by thread id.
pub fn load_threads(dir: &Path) -> Result<Vec<LoadedThread>, PersistError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let is_thread = path
            .file_stem()
            .and_then(|s| s.to_str())
            .is_some_and(|s| ThreadId::parse(s).is_ok())
            && path.extension().is_some_and(|e| e == "jsonl");
        if is_thread {
            paths.push(path);
        }
    }
    paths.sort();
    for p in paths {
        out.push(load_thread(&p)?);
    }
    Ok(out)
}

pub fn append_agent(dir: &Path, reg: &AgentRegistration) -> Result<(), PersistError> {
    let path = dir.join(AGENTS_FILE);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    file.write_all(&json_line(reg)).map_err(io_err(&path))
}

pub fn load_agents(dir: &Path) -> Result<Vec<AgentRegistration>, PersistError> {
    let path = dir.join(AGENTS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let reg: AgentRegistration =
            serde_json::from_str(&line).map_err(|e| PersistError::Corrupt {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        out.push(reg);
    }
    Ok(out)
}
