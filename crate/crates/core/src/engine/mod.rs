//! Patient-side conversation state machine.

pub mod guardrail;
pub mod loopback;
mod service;
pub mod transitions;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::domain::{
    ConversationProtocol, Initiator, PatientProfile, PendingLoopback, Session, SessionId, SessionStatus,
    SlotValue, Speaker, Turn, TurnKind, ValueKind,
};
use crate::gateway::{CompletionBackend, CompletionRequest, GatewayError, GenerationSettings, Purpose, RequestContext};
use crate::prompt::{Message, PromptEngine, PromptError, Role};
use crate::store::StoreError;

use self::guardrail::Guardrail;
use self::loopback::{classify_confirmation, detect_loopback_excluding, mentions_slot_value, Confirmation};
use self::transitions::{transition, Event, Refusal, Transition};

pub use service::SessionService;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_rounds: usize,
    /// Seconds of silence before a re-prompt.
    pub pause_timeout_secs: u64,
    pub reprompt_text: String,
    pub max_consecutive_reprompts: usize,
    pub unclear_confirmation_prefix: String,
    pub closing_phrases: Vec<String>,
    pub loopback_value_kinds: BTreeSet<ValueKind>,
    pub generation: GenerationSettings,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_rounds: 30,
            pause_timeout_secs: 60,
            reprompt_text: "Are you still there?".into(),
            max_consecutive_reprompts: 2,
            unclear_confirmation_prefix: "Sorry, I didn't catch that.".into(),
            closing_phrases: vec!["goodbye".into()],
            loopback_value_kinds: BTreeSet::from([ValueKind::Scalar1To10]),
            generation: GenerationSettings::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_rounds == 0 {
            return Err("max_rounds must be at least 1".into());
        }
        if self.pause_timeout_secs == 0 {
            return Err("pause_timeout must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("session is {status}; {reason}")]
    Lifecycle { status: &'static str, reason: &'static str },
    #[error("conversation exceeded {0} rounds and was aborted")]
    RoundLimit(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0} not found")]
    NotFound(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for EngineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { collection, key } => EngineError::NotFound(format!("{collection} `{key}`")),
            other => EngineError::Store(other),
        }
    }
}

fn lifecycle(status: SessionStatus, refusal: Refusal) -> EngineError {
    EngineError::Lifecycle {
        status: status.as_str(),
        reason: match refusal {
            Refusal::Closed => "no further turns are accepted",
            Refusal::ConfirmationPending => "a confirmation answer is expected",
            Refusal::NothingPending => "no confirmation is pending",
        },
    }
}

/// Applies `event` through the lifecycle table.
fn apply(session: &mut Session, event: Event) -> Result<SessionStatus, EngineError> {
    match transition(session.status, event) {
        Transition::To(next) => {
            session.status = next;
            Ok(next)
        }
        Transition::Refuse(refusal) => Err(lifecycle(session.status, refusal)),
    }
}

/// Outcome of a silence timeout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PauseOutcome {
    /// The timeout has not elapsed yet.
    NotDue,
    Reprompted(Turn),
    /// Re-prompt cap reached (or already paused); nothing was emitted.
    Paused,
}

#[derive(Clone, Copy)]
pub struct SessionContext<'a> {
    pub profile: &'a PatientProfile,
    pub protocol: &'a ConversationProtocol,
}

/// Drives one session at a time. Callers serialize access per session.
pub struct ConversationEngine {
    prompts: Arc<PromptEngine>,
    backend: Arc<dyn CompletionBackend>,
    guardrail: Guardrail,
    config: EngineConfig,
    clock: Arc<dyn Clock>,
}

impl ConversationEngine {
    pub fn new(
        prompts: Arc<PromptEngine>,
        backend: Arc<dyn CompletionBackend>,
        guardrail: Guardrail,
        config: EngineConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, EngineError> {
        config.validate().map_err(EngineError::Configuration)?;
        Ok(Self { prompts, backend, guardrail, config, clock })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Opens a session. A provider-initiated session starts with a
    /// generated opening question; a patient-initiated one waits.
    pub fn start(
        &self,
        ctx: SessionContext<'_>,
        session_id: SessionId,
        initiator: Initiator,
    ) -> Result<Session, EngineError> {
        let mut session = Session::new(
            session_id,
            ctx.profile.patient_id.clone(),
            ctx.protocol.protocol_id.clone(),
            initiator,
            self.clock.now(),
        );
        if initiator == Initiator::Provider {
            let text = self.generate(ctx, &session, None)?;
            self.push_reply(&mut session, text)?;
        }
        Ok(session)
    }

    pub fn detect_loopback(
        &self,
        session: &Session,
        protocol: &ConversationProtocol,
        question: &str,
        answer: &str,
    ) -> Option<(String, SlotValue)> {
        let collected = |slot: &str| session.collected_slots.contains_key(slot);
        detect_loopback_excluding(protocol, &self.config.loopback_value_kinds, &collected, question, answer)
    }

    /// Handles one patient utterance and returns the assistant's reply.
    /// On a model failure the session is left exactly as it was.
    pub fn patient_turn(
        &self,
        ctx: SessionContext<'_>,
        session: &mut Session,
        utterance: &str,
    ) -> Result<Turn, EngineError> {
        if session.status == SessionStatus::AwaitingConfirmation {
            return self.resolve_loopback(ctx, session, utterance);
        }
        if let Transition::Refuse(r) = transition(session.status, Event::PatientUtterance) {
            return Err(lifecycle(session.status, r));
        }
        let snapshot = session.clone();
        let result = self.patient_turn_inner(ctx, session, utterance);
        if matches!(result, Err(EngineError::Gateway(_) | EngineError::Prompt(_))) {
            *session = snapshot;
        }
        result
    }

    fn patient_turn_inner(
        &self,
        ctx: SessionContext<'_>,
        session: &mut Session,
        utterance: &str,
    ) -> Result<Turn, EngineError> {
        let question = session.last_assistant_question().map(|t| (t.turn_index, t.text.clone()));
        session.push_turn(Speaker::Patient, TurnKind::Normal, utterance, self.clock.now());
        self.check_round_limit(session)?;

        let candidate = question
            .as_ref()
            .and_then(|(idx, q)| self.detect_loopback(session, ctx.protocol, q, utterance).map(|c| (*idx, c)));
        match candidate {
            Some((question_turn, (slot, value))) => {
                self.request_confirmation(ctx, session, question_turn, slot, value)
            }
            None => {
                apply(session, Event::PatientUtterance)?;
                let text = self.generate(ctx, session, None)?;
                self.push_reply(session, text)
            }
        }
    }

    /// Interprets the patient's answer to a pending confirmation.
    pub fn resolve_loopback(
        &self,
        ctx: SessionContext<'_>,
        session: &mut Session,
        answer: &str,
    ) -> Result<Turn, EngineError> {
        if session.status != SessionStatus::AwaitingConfirmation || session.pending_loopback.is_none() {
            let r = match transition(session.status, Event::Affirmed) {
                Transition::Refuse(r) => r,
                Transition::To(_) => Refusal::NothingPending,
            };
            return Err(lifecycle(session.status, r));
        }
        let snapshot = session.clone();
        let result = self.resolve_inner(ctx, session, answer);
        if matches!(result, Err(EngineError::Gateway(_) | EngineError::Prompt(_))) {
            *session = snapshot;
        }
        result
    }

    fn resolve_inner(
        &self,
        ctx: SessionContext<'_>,
        session: &mut Session,
        answer: &str,
    ) -> Result<Turn, EngineError> {
        session.push_turn(Speaker::Patient, TurnKind::LoopbackConfirmResponse, answer, self.clock.now());
        self.check_round_limit(session)?;
        let pending = session.pending_loopback.clone().expect("checked by caller");

        match classify_confirmation(answer) {
            Confirmation::Affirmed => {
                apply(session, Event::Affirmed)?;
                session.pending_loopback = None;
                session.collected_slots.insert(pending.slot_name, pending.candidate_value);
                let text = self.generate(ctx, session, None)?;
                self.push_reply(session, text)
            }
            Confirmation::Unclear if pending.reasks == 0 => {
                apply(session, Event::Unclear)?;
                let previous = session
                    .turns
                    .iter()
                    .rev()
                    .find(|t| t.kind == TurnKind::LoopbackConfirmRequest)
                    .map(|t| t.text.clone())
                    .unwrap_or_default();
                if let Some(p) = session.pending_loopback.as_mut() {
                    p.reasks += 1;
                }
                let text = format!("{} {}", self.config.unclear_confirmation_prefix, previous);
                Ok(session.push_turn(Speaker::Assistant, TurnKind::LoopbackConfirmRequest, text.trim(), self.clock.now()))
            }
            Confirmation::Unclear | Confirmation::Rejected => {
                apply(session, Event::Rejected)?;
                session.pending_loopback = None;
                let question = session
                    .turns
                    .get(pending.question_turn)
                    .map(|t| t.text.clone())
                    .unwrap_or_default();
                let correction = self
                    .detect_loopback(session, ctx.protocol, &question, answer)
                    .filter(|(slot, value)| *slot != pending.slot_name || *value != pending.candidate_value);
                match correction {
                    Some((slot, value)) => self.request_confirmation(ctx, session, pending.question_turn, slot, value),
                    None => Ok(session.push_turn(Speaker::Assistant, TurnKind::Normal, question, self.clock.now())),
                }
            }
        }
    }

    fn request_confirmation(
        &self,
        ctx: SessionContext<'_>,
        session: &mut Session,
        question_turn: usize,
        slot: String,
        value: SlotValue,
    ) -> Result<Turn, EngineError> {
        let description = ctx
            .protocol
            .slot(&slot)
            .map(|s| s.description.clone())
            .unwrap_or_else(|| slot.replace('_', " "));
        let shown = value.to_string();
        let instruction = self.prompts.loopback_instruction(&slot, &description, &shown);
        let generated = self.generate(ctx, session, Some(instruction))?;
        let text = if mentions_slot_value(&generated, &value) && generated.trim_end().ends_with('?') {
            generated
        } else {
            self.prompts.loopback_fallback(&slot, &description, &shown)
        };
        apply(session, Event::LoopbackCandidate)?;
        session.pending_loopback = Some(PendingLoopback {
            slot_name: slot,
            candidate_value: value,
            question_turn,
            reasks: 0,
        });
        Ok(session.push_turn(Speaker::Assistant, TurnKind::LoopbackConfirmRequest, text, self.clock.now()))
    }

    fn next_round(session: &Session) -> usize {
        session
            .turns
            .iter()
            .filter(|t| t.speaker == Speaker::Assistant && t.kind != TurnKind::Reprompt)
            .count()
            + 1
    }

    fn check_round_limit(&self, session: &mut Session) -> Result<(), EngineError> {
        if Self::next_round(session) > self.config.max_rounds {
            apply(session, Event::RoundLimitExceeded)?;
            session.pending_loopback = None;
            session.closed_at = Some(self.clock.now());
            return Err(EngineError::RoundLimit(self.config.max_rounds));
        }
        Ok(())
    }

    fn generate(
        &self,
        ctx: SessionContext<'_>,
        session: &Session,
        extra_instruction: Option<String>,
    ) -> Result<String, EngineError> {
        let round = Self::next_round(session);
        let mut bundle = self.prompts.build_question_prompt(ctx.profile, ctx.protocol, &session.turns, round)?;
        if let Some(extra) = extra_instruction {
            bundle.assembled.push(Message::new(Role::System, extra));
        }
        let request = CompletionRequest::from_bundle(
            &bundle,
            &self.config.generation,
            RequestContext {
                purpose: Purpose::Question,
                round: Some(round),
                last_patient_utterance: session.last_patient_utterance().map(str::to_owned),
            },
        );
        let reply = self.backend.complete(&request)?;
        let reply = reply.trim();
        if reply.is_empty() {
            return Err(GatewayError::MalformedResponse("empty reply".into()).into());
        }
        Ok(self.guardrail.enforce(reply).0)
    }

    fn is_closing(&self, reply: &str) -> bool {
        let lower = reply.to_lowercase();
        self.config.closing_phrases.iter().any(|p| {
            let p = p.to_lowercase();
            lower.match_indices(&p).any(|(i, _)| {
                let before = lower[..i].chars().next_back();
                let after = lower[i + p.len()..].chars().next();
                !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
            })
        })
    }

    fn push_reply(&self, session: &mut Session, text: String) -> Result<Turn, EngineError> {
        let now = self.clock.now();
        if self.is_closing(&text) {
            apply(session, Event::ClosingReply)?;
            session.pending_loopback = None;
            session.closed_at = Some(now);
            Ok(session.push_turn(Speaker::Assistant, TurnKind::Closing, text, now))
        } else {
            Ok(session.push_turn(Speaker::Assistant, TurnKind::Normal, text, now))
        }
    }

    /// Re-prompts after a silence. After the configured number of
    /// consecutive re-prompts the session pauses instead.
    pub fn handle_pause(&self, session: &mut Session) -> Result<PauseOutcome, EngineError> {
        if let Transition::Refuse(r) = transition(session.status, Event::Timeout) {
            return Err(lifecycle(session.status, r));
        }
        if session.status == SessionStatus::Paused {
            return Ok(PauseOutcome::Paused);
        }
        let now = self.clock.now();
        let last = session.last_turn().map_or(session.created_at, |t| t.timestamp);
        if (now - last).num_milliseconds() < (self.config.pause_timeout_secs as i64) * 1000 {
            return Ok(PauseOutcome::NotDue);
        }
        let trailing = session
            .turns
            .iter()
            .rev()
            .take_while(|t| t.kind == TurnKind::Reprompt)
            .count();
        if trailing >= self.config.max_consecutive_reprompts {
            apply(session, Event::TimeoutCapReached)?;
            session.pending_loopback = None;
            return Ok(PauseOutcome::Paused);
        }
        apply(session, Event::Timeout)?;
        let text = match session.last_assistant_question() {
            Some(q) => format!("{} {}", self.config.reprompt_text, q.text),
            None => self.config.reprompt_text.clone(),
        };
        Ok(PauseOutcome::Reprompted(session.push_turn(Speaker::Assistant, TurnKind::Reprompt, text, now)))
    }

    /// Ends the session on request. `abort` marks it aborted instead of completed.
    pub fn close(&self, session: &mut Session, abort: bool) -> Result<(), EngineError> {
        apply(session, if abort { Event::AbortRequested } else { Event::CloseRequested })?;
        session.pending_loopback = None;
        session.closed_at = Some(self.clock.now());
        Ok(())
    }
}

#[cfg(test)]
mod tests;
