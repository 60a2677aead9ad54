use std::collections::BTreeSet;

use crate::client::A2aApi;
use crate::model::{AgentId, Message, MessageKind};
use crate::orchestration::consensus::{collect_votes, decide_consensus, Vote};
use crate::orchestration::protocol;
use crate::orchestration::reasoner::{CompileContext, Reasoner};
use crate::orchestration::run::submit;
use crate::orchestration::{OrchError, OrchErrorCode};

use super::{accepted_results, post, transcript, Action, Responder, RoleAgent, RoleContext};

/// f: compiles R* on request, submits it once the planner reports
/// consensus, and carries out give-up instructions. Before submitting it
/// recomputes the decision from the transcript itself.
pub struct AnswerFinder {
    responder: Responder,
    reasoner: Box<dyn Reasoner>,
}

impl AnswerFinder {
    pub fn new(id: AgentId, ctx: RoleContext, reasoner: Box<dyn Reasoner>) -> Self {
        Self {
            responder: Responder::new(id, ctx),
            reasoner,
        }
    }

    fn on_compile_request(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        m: &Message,
        listed: &[u64],
    ) -> Result<(), OrchError> {
        let tr = transcript(api, &m.thread)?;
        if tr.is_closed() {
            return Ok(());
        }
        let accepted: Vec<Message> =
            accepted_results(&tr.messages, &self.responder.ctx.roles.critique)
                .into_iter()
                .filter(|r| listed.contains(&r.seq))
                .collect();
        if accepted.is_empty() {
            let why = format!(
                "{}: none of the listed results was accepted",
                OrchErrorCode::NoValidatedResults
            );
            post(api, &m.thread, MessageKind::Progress, &why, &[])?;
            return Ok(());
        }
        let cctx = CompileContext {
            agent: &self.responder.id,
            goal: &self.responder.ctx.task,
            request: m,
            accepted_results: &accepted,
        };
        let Some(t) = self.reasoner.compile(&cctx) else {
            return Ok(());
        };
        let Some(due) = t.delay.due(now) else {
            return Ok(());
        };
        self.responder.agenda.schedule(
            due,
            m.thread.clone(),
            Action::Candidate {
                answer: t.value.answer,
                rationale: t.value.rationale,
            },
        );
        Ok(())
    }

    fn on_give_up(&mut self, api: &dyn A2aApi, m: &Message, reason: &str) -> Result<(), OrchError> {
        let answer = format!("{}{reason}", protocol::GIVE_UP_PREFIX);
        let seq = match super::super::run::propose_candidate(api, &m.thread, &answer, None, 0) {
            Ok(s) => s,
            Err(e) if e.code == OrchErrorCode::Aborted => return Err(e),
            Err(_) => return Ok(()),
        };
        let tr = transcript(api, &m.thread)?;
        if let Some(c) = tr.messages.iter().find(|x| x.seq == seq) {
            match submit(api, &m.thread, c, None) {
                Ok(_) => {}
                Err(e) if e.code == OrchErrorCode::Aborted => return Err(e),
                Err(e) => tracing::debug!(error = %e, "give-up submission refused"),
            }
        }
        Ok(())
    }

    fn on_consensus(&mut self, api: &dyn A2aApi, note: &Message) -> Result<(), OrchError> {
        let Some(parsed) = protocol::parse_consensus_note(&note.body) else {
            return Ok(());
        };
        let tr = transcript(api, &note.thread)?;
        if tr.is_closed() {
            return Ok(());
        }
        let Some(candidate) = tr
            .messages
            .iter()
            .find(|c| c.seq == parsed.candidate_seq && c.kind == MessageKind::Candidate)
        else {
            return Ok(());
        };
        let mut expected: BTreeSet<AgentId> = tr.header.participants.iter().cloned().collect();
        expected.remove(&self.responder.id);
        let polled = if parsed.polled.is_subset(&expected) {
            parsed.polled
        } else {
            expected
        };
        let votes: Vec<Vote> = collect_votes(&tr.messages, candidate.seq, &polled, Some(note.seq))
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let decision = decide_consensus(
            &votes,
            polled.len(),
            self.responder.ctx.limits.consensus_policy,
        );
        match submit(api, &note.thread, candidate, Some(&decision)) {
            Ok(_) => Ok(()),
            Err(e) if e.code == OrchErrorCode::Aborted => Err(e),
            Err(e) => {
                let body = protocol::submit_refusal(candidate.seq, &e.to_string());
                post(api, &note.thread, MessageKind::Progress, &body, &[]).map(|_| ())
            }
        }
    }
}

impl RoleAgent for AnswerFinder {
    fn id(&self) -> &AgentId {
        &self.responder.id
    }

    fn activate(
        &mut self,
        api: &dyn A2aApi,
        now: u64,
        delivered: &[Message],
    ) -> Result<(), OrchError> {
        let planner = self.responder.ctx.roles.planner.clone();
        for m in delivered {
            if m.sender == planner {
                if let Some(reason) = protocol::parse_give_up_instruction(&m.body) {
                    let reason = reason.to_owned();
                    self.on_give_up(api, m, &reason)?;
                    continue;
                }
                if let Some(listed) = protocol::parse_compile_request(&m.body) {
                    self.on_compile_request(api, now, m, &listed)?;
                    continue;
                }
                if protocol::parse_consensus_note(&m.body).is_some_and(|c| c.accepted) {
                    self.on_consensus(api, m)?;
                    continue;
                }
            }
            self.responder
                .respond(api, self.reasoner.as_mut(), now, m)?;
        }
        self.responder.agenda.fire(api, now)
    }

    fn next_deadline(&self) -> Option<u64> {
        self.responder.agenda.next_due()
    }
}
