use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::{ErrorCode, ProtocolError};
use crate::model::{AgentId, Message, MessageKind, ThreadId};

use super::A2aApi;

/// A message a handler wants sent in reaction to a delivered mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outbound {
    /// Defaults to the thread of the triggering message.
    pub thread: Option<ThreadId>,
    pub kind: MessageKind,
    pub body: String,
    pub mentions: Vec<AgentId>,
}

impl Outbound {
    pub fn reply(kind: MessageKind, body: impl Into<String>, mentions: Vec<AgentId>) -> Self {
        Self {
            thread: None,
            kind,
            body: body.into(),
            mentions,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoopStats {
    pub wakeups: u64,
    pub handled: u64,
    pub handler_errors: u64,
    /// Set when the loop ended because the transport failed.
    pub terminal_error: Option<ProtocolError>,
}

pub struct LoopHandle {
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<LoopStats>>,
}

impl LoopHandle {
    /// Asks the loop to exit after its current wait returns.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.join.as_ref().is_none_or(|j| j.is_finished())
    }

    pub fn join(mut self) -> LoopStats {
        self.join
            .take()
            .map(|j| j.join().unwrap_or_default())
            .unwrap_or_default()
    }
}

/// Runs `wait_for_mentions` in a loop on a dedicated thread and hands
/// every delivered message to the handler, once, in delivery order.
///
/// The handler's outbound messages are sent before the next wait. A handler
/// error or panic is reported to the originating thread as a `system`
/// message `handler-error: …` and the loop carries on. The loop owns
/// `wait_for_mentions` for its agent; do not issue competing waits.
pub struct MentionLoop;

impl MentionLoop {
    pub fn spawn<A, H>(api: Arc<A>, mut handler: H, idle_timeout_ms: u64) -> LoopHandle
    where
        A: A2aApi + ?Sized + 'static,
        H: FnMut(&Message) -> Result<Vec<Outbound>, String> + Send + 'static,
    {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let join = std::thread::Builder::new()
            .name(format!("mention-loop-{}", api.agent()))
            .spawn(move || {
                let mut stats = LoopStats::default();
                while !flag.load(Ordering::SeqCst) {
                    let batch = match api.wait_for_mentions(None, Some(idle_timeout_ms)) {
                        Ok(b) => b,
                        Err(e) => {
                            tracing::warn!(agent = %api.agent(), error = %e, "mention loop stopping");
                            stats.terminal_error = Some(e);
                            break;
                        }
                    };
                    stats.wakeups += 1;
                    for m in &batch {
                        stats.handled += 1;
                        let outcome = catch_unwind(AssertUnwindSafe(|| handler(m)))
                            .unwrap_or_else(|p| Err(panic_text(p)));
                        match outcome {
                            Ok(out) => {
                                for o in out {
                                    let thread = o.thread.as_ref().unwrap_or(&m.thread);
                                    if let Err(e) =
                                        api.send_message(thread, o.kind, &o.body, &o.mentions)
                                    {
                                        tracing::warn!(agent = %api.agent(), error = %e, "handler reply rejected");
                                    }
                                }
                            }
                            Err(why) => {
                                stats.handler_errors += 1;
                                tracing::warn!(agent = %api.agent(), seq = m.seq, error = %why, "handler failed");
                                let body = format!("handler-error: {why}");
                                match api.send_message(&m.thread, MessageKind::System, &body, &[]) {
                                    Ok(_) => {}
                                    Err(e) if e.code == ErrorCode::ThreadClosed => {}
                                    Err(e) => tracing::warn!(error = %e, "cannot report handler error"),
                                }
                            }
                        }
                    }
                }
                stats
            })
            .expect("spawn mention loop");
        LoopHandle {
            stop,
            join: Some(join),
        }
    }
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "handler panicked".to_owned()
    }
}
