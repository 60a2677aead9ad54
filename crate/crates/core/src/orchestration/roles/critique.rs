use crate::client::A2aApi;
use crate::model::{AgentId, Message, MessageKind};
use crate::orchestration::protocol::{self, VerdictKind};
use crate::orchestration::reasoner::{Reasoner, Verdict};
use crate::orchestration::OrchError;

use super::{Action, Responder, RoleAgent, RoleContext};

/// c: one verdict per delivered result, addressed to the planner and
/// naming the result by seq.
pub struct CritiqueAgent {
    responder: Responder,
    reasoner: Box<dyn Reasoner>,
}

impl CritiqueAgent {
    pub fn new(id: AgentId, ctx: RoleContext, reasoner: Box<dyn Reasoner>) -> Self {
        Self {
            responder: Responder::new(id, ctx),
            reasoner,
        }
    }
}

impl RoleAgent for CritiqueAgent {
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
            if m.kind != MessageKind::Result {
                self.responder
                    .respond(api, self.reasoner.as_mut(), now, m)?;
                continue;
            }
            let Some(t) = self.reasoner.critique(m) else {
                continue;
            };
            let Some(due) = t.delay.due(now) else {
                continue;
            };
            let (kind, rationale) = match t.value {
                Verdict::Accept(r) => (VerdictKind::Accept, r),
                Verdict::Uncertain(r) => (VerdictKind::Uncertain, r),
            };
            self.responder.agenda.schedule(
                due,
                m.thread.clone(),
                Action::Post {
                    kind: MessageKind::Critique,
                    body: protocol::verdict(kind, m.seq, &rationale),
                    mentions: vec![self.responder.ctx.roles.planner.clone()],
                },
            );
        }
        self.responder.agenda.fire(api, now)
    }

    fn next_deadline(&self) -> Option<u64> {
        self.responder.agenda.next_due()
    }
}
