//! `coral`: run the coordination server, run scenarios, inspect threads and
//! the agent registry.
//!
//! Exit codes: 0 success, 1 scenario expectation failure, 2 environment or
//! input error (bad flags, unreadable scenario, unknown thread, bind or
//! connect failure).

use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;

use clap::{Parser, Subcommand, ValueEnum};
use coral_a2a::client::{A2aApi, Session};
use coral_a2a::harness::{load_scenario, run_scenario, run_stress, RunReport, StressOptions};
use coral_a2a::model::{encode_message, AgentId, Message, ThreadId};
use coral_a2a::server::persist::{load_thread, thread_path};
use coral_a2a::server::tcp::TcpServer;
use coral_a2a::server::{Server, ServerConfig};
use tracing_subscriber::EnvFilter;

/// Observer name the CLI uses on the wire. Observers are never registered.
const OBSERVER: &str = "coral_cli";
const BODY_WIDTH: usize = 80;

#[derive(Parser)]
#[command(
    name = "coral",
    version,
    about = "Thread-based agent coordination server and scenario runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordination server until interrupted.
    Serve {
        #[arg(long, env = "CORAL_LISTEN", default_value = "127.0.0.1:7070")]
        listen: String,
        /// Directory for thread transcripts and the agent registry.
        #[arg(long)]
        persist: Option<PathBuf>,
        /// Default long-poll timeout for wait_for_mentions.
        #[arg(long)]
        wait_timeout_ms: Option<u64>,
        /// Reject unregistered agents at hello instead of registering them.
        #[arg(long)]
        no_auto_register: bool,
    },
    /// Run a scenario file and check its expectations.
    RunScenario {
        path: PathBuf,
        /// Persist the run's transcript under this directory.
        #[arg(long, conflicts_with = "stress")]
        out: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Run over loopback TCP with real threads and a wall clock.
        #[arg(long)]
        stress: bool,
    },
    /// Print a thread's transcript.
    DumpThread {
        thread: String,
        #[arg(long, required_unless_present = "connect", conflicts_with = "connect")]
        dir: Option<PathBuf>,
        #[arg(long)]
        connect: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Jsonl)]
        format: Format,
    },
    /// List the registered agents of a running server.
    Agents {
        #[arg(long, env = "CORAL_LISTEN", default_value = "127.0.0.1:7070")]
        connect: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Pretty,
}

/// A failure with its exit code.
struct Failure(u8, String);

fn env_err(e: impl std::fmt::Display) -> Failure {
    Failure(2, e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Server lifecycle lines are the point of `serve`; elsewhere they are noise.
    let level = if matches!(cli.command, Command::Serve { .. }) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)),
        )
        .init();
    let result = match cli.command {
        Command::Serve {
            listen,
            persist,
            wait_timeout_ms,
            no_auto_register,
        } => serve(listen, persist, wait_timeout_ms, !no_auto_register),
        Command::RunScenario {
            path,
            out,
            report,
            stress,
        } => run(&path, out.as_deref(), report.as_deref(), stress),
        Command::DumpThread {
            thread,
            dir,
            connect,
            format,
        } => dump_thread(&thread, dir.as_deref(), connect.as_deref(), format),
        Command::Agents { connect } => agents(&connect),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("coral: {msg}");
            ExitCode::from(code)
        }
    }
}

fn serve(
    listen: String,
    persist: Option<PathBuf>,
    wait_timeout_ms: Option<u64>,
    auto_register: bool,
) -> Result<(), Failure> {
    let defaults = ServerConfig::default();
    let wait_default = wait_timeout_ms.unwrap_or(defaults.wait_timeout_default_ms);
    let config = ServerConfig {
        listen_address: listen.clone(),
        wait_timeout_default_ms: wait_default,
        wait_timeout_max_ms: defaults.wait_timeout_max_ms.max(wait_default),
        persistence_dir: persist,
        auto_register,
        ..defaults
    };
    let server = Server::new(config).map_err(env_err)?;
    let mut tcp = TcpServer::bind(server, &listen).map_err(env_err)?;

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(env_err)?;
    println!("coral: ready on {}", tcp.local_addr());
    let _ = std::io::stdout().flush();
    let _ = rx.recv();
    tracing::info!("interrupted; shutting down");
    // Flushes every thread log before returning.
    tcp.shutdown();
    Ok(())
}

fn run(
    path: &Path,
    out: Option<&Path>,
    report_path: Option<&Path>,
    stress: bool,
) -> Result<(), Failure> {
    let scenario = load_scenario(path).map_err(env_err)?;
    let report = if stress {
        run_stress(&scenario, &StressOptions::default())
    } else {
        run_scenario(&scenario, out)
    }
    .map_err(env_err)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match report_path {
        Some(p) => std::fs::write(p, format!("{json}\n"))
            .map_err(|e| Failure(2, format!("{}: {e}", p.display())))?,
        None => println!("{json}"),
    }
    summarize(&report)
}

fn summarize(report: &RunReport) -> Result<(), Failure> {
    if report.pass {
        eprintln!(
            "{}: PASS ({}, {} messages)",
            report.scenario, report.outcome, report.message_count
        );
        return Ok(());
    }
    for v in &report.violations {
        eprintln!("  violation: {v}");
    }
    Err(Failure(
        1,
        format!(
            "{}: FAIL ({} violations)",
            report.scenario,
            report.violations.len()
        ),
    ))
}

fn observer(endpoint: &str) -> Result<Session, Failure> {
    let me = AgentId::new(OBSERVER).expect("observer id is valid");
    Session::observe(endpoint, &me).map_err(env_err)
}

fn dump_thread(
    raw: &str,
    dir: Option<&Path>,
    connect: Option<&str>,
    format: Format,
) -> Result<(), Failure> {
    let id = ThreadId::parse(raw).map_err(|e| Failure(2, format!("bad thread id {raw:?}: {e}")))?;
    let mut stdout = std::io::stdout().lock();
    let messages = match (dir, connect) {
        (Some(dir), _) => {
            let path = thread_path(dir, &id);
            if !path.is_file() {
                return Err(Failure(
                    2,
                    format!("unknown thread {id} in {}", dir.display()),
                ));
            }
            let loaded = load_thread(&path).map_err(env_err)?;
            if let Format::Jsonl = format {
                // The persisted bytes, verbatim.
                let bytes = std::fs::read(&path).map_err(env_err)?;
                return stdout.write_all(&bytes).map_err(env_err);
            }
            loaded.messages
        }
        (None, Some(endpoint)) => {
            let session = observer(endpoint)?;
            let tr = session.get_transcript(&id).map_err(env_err);
            session.close();
            let tr = tr?;
            if let Format::Jsonl = format {
                // A live transcript carries messages only; membership events
                // exist solely in the persisted file.
                for m in &tr.messages {
                    let line = encode_message(m).map_err(env_err)?;
                    stdout.write_all(&line).map_err(env_err)?;
                    stdout.write_all(b"\n").map_err(env_err)?;
                }
                return Ok(());
            }
            tr.messages
        }
        (None, None) => return Err(Failure(2, "need --dir or --connect".into())),
    };
    write!(stdout, "{}", pretty(&messages)).map_err(env_err)
}

fn one_line(body: &str) -> String {
    let flat: String = body
        .chars()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect();
    if flat.chars().count() <= BODY_WIDTH {
        return flat;
    }
    let mut cut: String = flat.chars().take(BODY_WIDTH - 1).collect();
    cut.push('…');
    cut
}

/// Header plus one line per message.
fn pretty(messages: &[Message]) -> String {
    let mentions: Vec<String> = messages
        .iter()
        .map(|m| {
            if m.mentions.is_empty() {
                "-".to_owned()
            } else {
                m.mentions
                    .iter()
                    .map(|a| format!("@{a}"))
                    .collect::<Vec<_>>()
                    .join(",")
            }
        })
        .collect();
    let w_seq = messages
        .iter()
        .map(|m| m.seq.to_string().len())
        .max()
        .unwrap_or(0)
        .max(3);
    let w_sender = messages
        .iter()
        .map(|m| m.sender.as_str().len())
        .max()
        .unwrap_or(0)
        .max(6);
    let w_kind = messages
        .iter()
        .map(|m| m.kind.as_str().len())
        .max()
        .unwrap_or(0)
        .max(4);
    let w_mentions = mentions.iter().map(String::len).max().unwrap_or(0).max(8);
    let mut out = format!(
        "{:>w_seq$}  {:<w_sender$}  {:<w_kind$}  {:<w_mentions$}  BODY\n",
        "SEQ", "SENDER", "KIND", "MENTIONS"
    );
    for (m, at) in messages.iter().zip(&mentions) {
        out.push_str(&format!(
            "{:>w_seq$}  {:<w_sender$}  {:<w_kind$}  {:<w_mentions$}  {}\n",
            m.seq,
            m.sender.as_str(),
            m.kind.as_str(),
            at,
            one_line(&m.body)
        ));
    }
    out
}

fn agents(endpoint: &str) -> Result<(), Failure> {
    let session = observer(endpoint)?;
    let listed = session.list_agents().map_err(env_err);
    session.close();
    let mut listed = listed?;
    listed.sort_by(|a, b| a.id.cmp(&b.id));
    let w_id = listed
        .iter()
        .map(|r| r.id.as_str().len())
        .max()
        .unwrap_or(0)
        .max(2);
    let w_role = listed
        .iter()
        .map(|r| r.role.as_str().len())
        .max()
        .unwrap_or(0)
        .max(4);
    println!("{:<w_id$}  {:<w_role$}  DESCRIPTION", "ID", "ROLE");
    for r in &listed {
        println!(
            "{:<w_id$}  {:<w_role$}  {}",
            r.id.as_str(),
            r.role.as_str(),
            one_line(&r.description)
        );
    }
    Ok(())
}
