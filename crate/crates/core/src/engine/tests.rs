use std::sync::Arc;

use chrono::Duration;
use parking_lot::Mutex;

use super::*;
use crate::clock::ManualClock;
use crate::domain::{timestamp_from_millis, validate_session};
use crate::fixtures;
use crate::gateway::ScriptedBackend;

type Reply = Box<dyn Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync>;

struct FnBackend {
    reply: Reply,
    calls: Mutex<usize>,
}

impl CompletionBackend for FnBackend {
    fn backend_id(&self) -> &str {
        "fn"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        *self.calls.lock() += 1;
        (self.reply)(request)
    }
}

fn fn_backend(reply: impl Fn(&CompletionRequest) -> Result<String, GatewayError> + Send + Sync + 'static) -> Arc<FnBackend> {
    Arc::new(FnBackend { reply: Box::new(reply), calls: Mutex::new(0) })
}

fn is_loopback_request(req: &CompletionRequest) -> bool {
    req.messages.last().is_some_and(|m| m.role == Role::System && m.content.contains("confirm it is correct"))
}

const RATE: &str = "On a scale of 1 to 10, how would you rate your pain?";

/// Asks for a pain rating, confirms with the value, then says goodbye once
/// the patient says "bye".
fn rating_backend() -> Arc<FnBackend> {
    fn_backend(|req| {
        if is_loopback_request(req) {
            let value = req.messages.last().unwrap().content.split(": ").nth(1).unwrap().split('.').next().unwrap().to_owned();
            return Ok(format!("You said {value}, is that right?"));
        }
        match req.context.last_patient_utterance.as_deref() {
            Some("bye") => Ok("Goodbye!".into()),
            _ => Ok(RATE.into()),
        }
    })
}

fn clock() -> Arc<ManualClock> {
    Arc::new(ManualClock::new(timestamp_from_millis(1_700_000_000_000)))
}

fn engine_with(backend: Arc<dyn CompletionBackend>, config: EngineConfig, clock: Arc<ManualClock>) -> ConversationEngine {
    ConversationEngine::new(Arc::new(PromptEngine::default()), backend, Guardrail::default(), config, clock).unwrap()
}

fn post_surgery_ctx() -> (PatientProfile, ConversationProtocol) {
    (fixtures::john(), fixtures::post_surgery_protocol())
}

fn started(engine: &ConversationEngine, profile: &PatientProfile, protocol: &ConversationProtocol) -> Session {
    engine
        .start(SessionContext { profile, protocol }, SessionId::new("s"), Initiator::Provider)
        .unwrap()
}

fn kinds(session: &Session) -> Vec<TurnKind> {
    session.turns.iter().map(|t| t.kind).collect()
}

fn replay(script: &str, persona_turns: Vec<fixtures::FixtureTurn>, profile: PatientProfile, protocol: ConversationProtocol, initiator: Initiator) {
    let backend = Arc::new(ScriptedBackend::from_json(script).unwrap());
    let clock = clock();
    let engine = engine_with(backend, EngineConfig::default(), clock.clone());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut session = engine.start(ctx, SessionId::new("replay"), initiator).unwrap();
    for t in persona_turns.iter().filter(|t| t.speaker == Speaker::Patient) {
        clock.advance(Duration::seconds(5));
        engine.patient_turn(ctx, &mut session, &t.text).unwrap();
    }
    let got: Vec<_> = session.turns.iter().map(|t| (t.speaker, t.kind, t.text.as_str())).collect();
    let want: Vec<_> = persona_turns.iter().map(|t| (t.speaker, t.kind, t.text.as_str())).collect();
    assert_eq!(got, want);
    assert_eq!(session.status, SessionStatus::Completed);
    assert!(validate_session(&session).is_empty(), "{:?}", validate_session(&session));
}

#[test]
fn replays_post_surgery_log() {
    let (p, q) = post_surgery_ctx();
    replay(fixtures::POST_SURGERY_SCRIPT_JSON, fixtures::post_surgery_turns(), p, q, Initiator::Provider);
}

#[test]
fn replays_daily_care_log() {
    replay(
        fixtures::DAILY_CARE_SCRIPT_JSON,
        fixtures::daily_care_turns(),
        fixtures::mary(),
        fixtures::daily_care_protocol(),
        Initiator::Patient,
    );
}

#[test]
fn post_surgery_replay_collects_pain_level() {
    let (profile, protocol) = post_surgery_ctx();
    let engine = engine_with(
        Arc::new(ScriptedBackend::from_json(fixtures::POST_SURGERY_SCRIPT_JSON).unwrap()),
        EngineConfig::default(),
        clock(),
    );
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    for t in fixtures::post_surgery_turns().iter().filter(|t| t.speaker == Speaker::Patient).take(4) {
        engine.patient_turn(ctx, &mut s, &t.text).unwrap();
    }
    assert_eq!(s.collected_slots.get("pain_level"), Some(&SlotValue::Scalar(2)));
    assert_eq!(s.status, SessionStatus::Active);
}

#[test]
fn negative_confirmation_reasks_original_question() {
    let (profile, protocol) = post_surgery_ctx();
    let engine = engine_with(rating_backend(), EngineConfig::default(), clock());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    let confirm = engine.patient_turn(ctx, &mut s, "It's about a 5").unwrap();
    assert_eq!(confirm.kind, TurnKind::LoopbackConfirmRequest);
    assert!(confirm.text.contains('5'));
    assert_eq!(s.status, SessionStatus::AwaitingConfirmation);

    let reask = engine.patient_turn(ctx, &mut s, "No").unwrap();
    assert_eq!(reask.kind, TurnKind::Normal);
    assert_eq!(reask.text, RATE);
    assert_eq!(s.status, SessionStatus::Active);
    assert!(s.collected_slots.is_empty());
    assert!(s.pending_loopback.is_none());
    assert!(validate_session(&s).is_empty());
}

#[test]
fn correction_gets_its_own_confirmation() {
    let (profile, protocol) = post_surgery_ctx();
    let engine = engine_with(rating_backend(), EngineConfig::default(), clock());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    engine.patient_turn(ctx, &mut s, "5").unwrap();
    let again = engine.patient_turn(ctx, &mut s, "No, I meant 4").unwrap();
    assert_eq!(again.kind, TurnKind::LoopbackConfirmRequest);
    assert!(again.text.contains('4'));
    assert_eq!(s.pending_loopback.as_ref().unwrap().candidate_value, SlotValue::Scalar(4));
    engine.patient_turn(ctx, &mut s, "Yes").unwrap();
    assert_eq!(s.collected_slots.get("pain_level"), Some(&SlotValue::Scalar(4)));
    assert!(validate_session(&s).is_empty(), "{:?}", validate_session(&s));
}

#[test]
fn unclear_answer_reasked_once_then_dropped() {
    let (profile, protocol) = post_surgery_ctx();
    let engine = engine_with(rating_backend(), EngineConfig::default(), clock());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    engine.patient_turn(ctx, &mut s, "7").unwrap();
    let reask = engine.patient_turn(ctx, &mut s, "hmm, let me think").unwrap();
    assert_eq!(reask.kind, TurnKind::LoopbackConfirmRequest);
    assert!(reask.text.starts_with("Sorry, I didn't catch that."));
    assert_eq!(s.status, SessionStatus::AwaitingConfirmation);
    let back = engine.patient_turn(ctx, &mut s, "whatever").unwrap();
    assert_eq!(back.text, RATE);
    assert_eq!(s.status, SessionStatus::Active);
    assert!(s.collected_slots.is_empty());
}

#[test]
fn confirmation_without_value_uses_fallback() {
    let (profile, protocol) = post_surgery_ctx();
    let backend = fn_backend(|req| Ok(if is_loopback_request(req) { "Okay, noted.".into() } else { RATE.into() }));
    let engine = engine_with(backend, EngineConfig::default(), clock());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    let confirm = engine.patient_turn(ctx, &mut s, "3").unwrap();
    assert!(confirm.text.contains('3') && confirm.text.ends_with('?'), "{}", confirm.text);
}

#[test]
fn collected_slot_is_not_looped_back_again() {
    let (profile, protocol) = post_surgery_ctx();
    let engine = engine_with(rating_backend(), EngineConfig::default(), clock());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    engine.patient_turn(ctx, &mut s, "3").unwrap();
    engine.patient_turn(ctx, &mut s, "yes").unwrap();
    let next = engine.patient_turn(ctx, &mut s, "6").unwrap();
    assert_eq!(next.kind, TurnKind::Normal);
}

#[test]
fn silence_reprompts_then_pauses_and_resumes() {
    let (profile, protocol) = post_surgery_ctx();
    let clock = clock();
    let engine = engine_with(rating_backend(), EngineConfig::default(), clock.clone());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);

    clock.advance(Duration::seconds(30));
    assert_eq!(engine.handle_pause(&mut s).unwrap(), PauseOutcome::NotDue);
    clock.advance(Duration::seconds(30));
    match engine.handle_pause(&mut s).unwrap() {
        PauseOutcome::Reprompted(t) => assert_eq!(t.text, format!("Are you still there? {RATE}")),
        other => panic!("{other:?}"),
    }
    clock.advance(Duration::seconds(60));
    assert!(matches!(engine.handle_pause(&mut s).unwrap(), PauseOutcome::Reprompted(_)));
    clock.advance(Duration::seconds(60));
    assert_eq!(engine.handle_pause(&mut s).unwrap(), PauseOutcome::Paused);
    assert_eq!(s.status, SessionStatus::Paused);
    assert_eq!(kinds(&s).iter().filter(|k| **k == TurnKind::Reprompt).count(), 2);

    clock.advance(Duration::seconds(600));
    let reply = engine.patient_turn(ctx, &mut s, "sorry, I'm back").unwrap();
    assert_eq!(reply.kind, TurnKind::Normal);
    assert_eq!(s.status, SessionStatus::Active);
    assert!(validate_session(&s).is_empty(), "{:?}", validate_session(&s));
}

#[test]
fn pause_during_confirmation_discards_candidate() {
    let (profile, protocol) = post_surgery_ctx();
    let clock = clock();
    let engine = engine_with(rating_backend(), EngineConfig::default(), clock.clone());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    engine.patient_turn(ctx, &mut s, "8").unwrap();
    for _ in 0..3 {
        clock.advance(Duration::seconds(61));
        engine.handle_pause(&mut s).unwrap();
    }
    assert_eq!(s.status, SessionStatus::Paused);
    assert!(s.pending_loopback.is_none());
    assert!(validate_session(&s).is_empty(), "{:?}", validate_session(&s));
}

#[test]
fn closed_sessions_refuse_turns() {
    let (profile, protocol) = post_surgery_ctx();
    let engine = engine_with(rating_backend(), EngineConfig::default(), clock());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    let closing = engine.patient_turn(ctx, &mut s, "bye").unwrap();
    assert_eq!(closing.kind, TurnKind::Closing);
    assert_eq!(s.status, SessionStatus::Completed);
    assert!(s.closed_at.is_some());
    let before = s.clone();
    assert!(matches!(engine.patient_turn(ctx, &mut s, "hello"), Err(EngineError::Lifecycle { .. })));
    assert!(matches!(engine.handle_pause(&mut s), Err(EngineError::Lifecycle { .. })));
    assert!(matches!(engine.close(&mut s, true), Err(EngineError::Lifecycle { .. })));
    assert_eq!(s, before);
}

#[test]
fn gateway_failure_leaves_session_unchanged() {
    let (profile, protocol) = post_surgery_ctx();
    let fail = Arc::new(Mutex::new(false));
    let flag = fail.clone();
    let backend = fn_backend(move |_| if *flag.lock() { Err(GatewayError::Timeout) } else { Ok(RATE.into()) });
    let engine = engine_with(backend, EngineConfig::default(), clock());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    *fail.lock() = true;
    let before = s.clone();
    assert!(matches!(engine.patient_turn(ctx, &mut s, "5"), Err(EngineError::Gateway(GatewayError::Timeout))));
    assert_eq!(s, before);
    assert!(matches!(engine.patient_turn(ctx, &mut s, "fine"), Err(EngineError::Gateway(_))));
    assert_eq!(s, before);
}

#[test]
fn round_limit_aborts() {
    let (profile, protocol) = post_surgery_ctx();
    let config = EngineConfig { max_rounds: 3, ..Default::default() };
    let engine = engine_with(fn_backend(|_| Ok("Tell me more?".into())), config, clock());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    engine.patient_turn(ctx, &mut s, "a").unwrap();
    engine.patient_turn(ctx, &mut s, "b").unwrap();
    assert!(matches!(engine.patient_turn(ctx, &mut s, "c"), Err(EngineError::RoundLimit(3))));
    assert_eq!(s.status, SessionStatus::Aborted);
    assert!(validate_session(&s).is_empty(), "{:?}", validate_session(&s));
}

#[test]
fn unsafe_reply_is_deflected() {
    let (profile, protocol) = post_surgery_ctx();
    let engine = engine_with(fn_backend(|_| Ok("Take 400mg ibuprofen every 6 hours.".into())), EngineConfig::default(), clock());
    let s = started(&engine, &profile, &protocol);
    assert_eq!(s.turns[0].text, guardrail::DEFAULT_DEFLECTION);
}

#[test]
fn empty_reply_is_an_error() {
    let (profile, protocol) = post_surgery_ctx();
    let engine = engine_with(fn_backend(|_| Ok("   ".into())), EngineConfig::default(), clock());
    let r = engine.start(SessionContext { profile: &profile, protocol: &protocol }, SessionId::new("s"), Initiator::Provider);
    assert!(matches!(r, Err(EngineError::Gateway(GatewayError::MalformedResponse(_)))));
}

#[test]
fn every_round_carries_the_optimization_part() {
    let (profile, protocol) = post_surgery_ctx();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let backend = fn_backend(move |req| {
        let text: String = req.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        log.lock().push((req.context.round.unwrap(), text.matches(crate::prompt::RESPONSE_OPTIMIZATION).count()));
        Ok("And how is your sleep?".into())
    });
    let engine = engine_with(backend, EngineConfig::default(), clock());
    let ctx = SessionContext { profile: &profile, protocol: &protocol };
    let mut s = started(&engine, &profile, &protocol);
    for u in ["fine", "ok", "good"] {
        engine.patient_turn(ctx, &mut s, u).unwrap();
    }
    for (round, count) in seen.lock().iter() {
        assert_eq!(round, count);
    }
}

#[test]
fn service_persists_turns_and_rolls_back() {
    let store = Arc::new(crate::store::InfoStore::in_memory());
    store.put_patient(&fixtures::john()).unwrap();
    store.put_protocol(&fixtures::post_surgery_protocol()).unwrap();
    let engine = Arc::new(engine_with(rating_backend(), EngineConfig::default(), clock()));
    let service = SessionService::new(store.clone(), engine);
    let s = service
        .start_session(&"patient-john".into(), &"post-surgery".into(), Initiator::Provider)
        .unwrap();
    let (turn, after) = service.patient_turn(&s.session_id, "5").unwrap();
    assert_eq!(turn.kind, TurnKind::LoopbackConfirmRequest);
    assert_eq!(store.get_session(&s.session_id).unwrap(), after);
    assert!(matches!(
        service.start_session(&"nobody".into(), &"post-surgery".into(), Initiator::Patient),
        Err(EngineError::NotFound(_))
    ));
    let closed = service.close(&s.session_id, false).unwrap();
    assert_eq!(closed.status, SessionStatus::Completed);
    assert!(matches!(service.patient_turn(&s.session_id, "x"), Err(EngineError::Lifecycle { .. })));
}
