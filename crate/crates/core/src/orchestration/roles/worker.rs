use std::collections::VecDeque;

use crate::client::A2aApi;
use crate::model::{AgentId, Message, MessageKind, ThreadId};
use crate::orchestration::plan::{Plan, Step};
use crate::orchestration::protocol;
use crate::orchestration::reasoner::{Reasoner, StepContext};
use crate::orchestration::OrchError;

use super::{post, transcript, Responder, RoleAgent, RoleContext};

struct Job {
    thread: ThreadId,
    version: u32,
    step: Step,
}

struct Busy {
    job: Job,
    /// `None`: never finishes.
    until: Option<u64>,
    body: String,
}

/// w ∈ 𝒲: executes its allocated steps one at a time. While a step is
/// running the worker answers nothing else; deferred mentions are handled
/// once it is free again.
pub struct Worker {
    responder: Responder,
    reasoner: Box<dyn Reasoner>,
    queue: VecDeque<Job>,
    busy: Option<Busy>,
    deferred: VecDeque<Message>,
}

impl Worker {
    pub fn new(id: AgentId, ctx: RoleContext, reasoner: Box<dyn Reasoner>) -> Self {
        Self {
            responder: Responder::new(id, ctx),
            reasoner,
            queue: VecDeque::new(),
            busy: None,
            deferred: VecDeque::new(),
        }
    }

    fn me(&self) -> &AgentId {
        &self.responder.id
    }

    fn latest_plan(
        &self,
        api: &dyn A2aApi,
        thread: &ThreadId,
    ) -> Result<(Option<Plan>, bool), OrchError> {
        let tr = transcript(api, thread)?;
        let plan = protocol::latest_plan(&tr.messages, &self.responder.ctx.roles.planner)
            .and_then(|m| Plan::parse(&m.body).ok());
        Ok((plan, tr.is_closed()))
    }

    fn start_next(&mut self, api: &dyn A2aApi, now: u64) -> Result<bool, OrchError> {
        let Some(job) = self.queue.pop_front() else {
            return Ok(false);
        };
        let (plan, closed) = self.latest_plan(api, &job.thread)?;
        let still_mine = plan
            .as_ref()
            .is_some_and(|p| p.owner(&job.step.id) == Some(self.me()));
        if closed || !still_mine {
            return Ok(true);
        }
        let goal = plan.map(|p| p.goal).unwrap_or_default();
        let sctx = StepContext {
            agent: &self.responder.id,
            goal: &goal,
            version: job.version,
            step: &job.step,
        };
        let t = self.reasoner.execute(&sctx);
        self.busy = Some(Busy {
            until: t.delay.due(now),
            body: t.value.into_body(),
            job,
        });
        Ok(true)
    }

    fn finish(&mut self, api: &dyn A2aApi, b: Busy) -> Result<(), OrchError> {
        let (plan, closed) = self.latest_plan(api, &b.job.thread)?;
        if closed {
            return Ok(());
        }
        let roles = &self.responder.ctx.roles;
        let current = plan.is_some_and(|p| p.owner(&b.job.step.id) == Some(&self.responder.id));
        if current {
            post(
                api,
                &b.job.thread,
                MessageKind::Result,
                &b.body,
                &[roles.critique.clone(), roles.planner.clone()],
            )?;
        } else {
            // Demoted: a late result is a contribution, not r_w.
            post(
                api,
                &b.job.thread,
                MessageKind::Progress,
                &protocol::late_result(&b.job.step.id, &b.body),
                std::slice::from_ref(&roles.planner),
            )?;
        }
        Ok(())
    }
}

impl RoleAgent for Worker {
    fn id(&self) -> &AgentId {
        &self.responder.id
    }

    fn activate(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        delivered: &[Message],
    ) -> Result<(), OrchError> {
        for m in delivered {
            let directive = (m.sender == self.responder.ctx.roles.planner)
                .then(|| protocol::parse_directive(&m.body))
                .flatten()
                .filter(|d| &d.worker == self.me());
            match directive {
                Some(d) => {
                    for step in d.steps {
                        self.queue.push_back(Job {
                            thread: m.thread.clone(),
                            version: d.version,
                            step,
                        });
                    }
                }
                None if self.busy.is_some() => self.deferred.push_back(m.clone()),
                None => self
                    .responder
                    .respond(api, self.reasoner.as_mut(), now, m)?,
            }
        }
        loop {
            if let Some(b) = &self.busy {
                if b.until.is_some_and(|u| u <= now) {
                    let b = self.busy.take().expect("checked above");
                    self.finish(api, b)?;
                    continue;
                }
                break;
            }
            if self.start_next(api, now)? {
                continue;
            }
            match self.deferred.pop_front() {
                Some(m) => self
                    .responder
                    .respond(api, self.reasoner.as_mut(), now, &m)?,
                None => break,
            }
        }
        self.responder.agenda.fire(api, now)
    }

    fn next_deadline(&self) -> Option<u64> {
        let busy = self.busy.as_ref().and_then(|b| b.until);
        match (busy, self.responder.agenda.next_due()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}
