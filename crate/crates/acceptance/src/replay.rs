//! Both reference conversations replayed through the engine with the
//! scripted backend must print exactly as logged.

use std::sync::Arc;
use std::time::{Duration, Instant};

use carelink_core::domain::{
    timestamp_from_millis, ConversationProtocol, Initiator, PatientProfile, SessionId, SessionStatus, SlotValue,
    Speaker, TurnKind,
};
use carelink_core::{fixtures, ConversationEngine, EngineConfig, ManualClock, PromptEngine, ScriptedBackend, SessionContext};

use crate::Verdict;

struct Case {
    name: &'static str,
    script: &'static str,
    log: &'static str,
    profile: PatientProfile,
    protocol: ConversationProtocol,
    initiator: Initiator,
    confirmations: usize,
}

/// Logged lines are "<speaker>: <text>"; patient lines are the persona.
fn patient_lines(log: &str) -> Vec<&str> {
    log.lines().filter_map(|l| l.strip_prefix("Patient: ")).collect()
}

fn run(case: &Case) -> Result<String, String> {
    let clock = Arc::new(ManualClock::new(timestamp_from_millis(1_709_546_400_000)));
    let backend = ScriptedBackend::from_json(case.script).map_err(|e| e.to_string())?;
    let engine = ConversationEngine::new(
        Arc::new(PromptEngine::default()),
        Arc::new(backend),
        Default::default(),
        EngineConfig::default(),
        clock,
    )
    .map_err(|e| e.to_string())?;
    let ctx = SessionContext { profile: &case.profile, protocol: &case.protocol };

    let started = Instant::now();
    let mut session = engine.start(ctx, SessionId::new(case.name), case.initiator).map_err(|e| e.to_string())?;
    for line in patient_lines(case.log) {
        engine.patient_turn(ctx, &mut session, line).map_err(|e| format!("{}: {e}", case.name))?;
    }
    let elapsed = started.elapsed();

    let mut printed = String::new();
    for t in &session.turns {
        let who = if t.speaker == Speaker::Patient { "Patient" } else { "Voice Assistant" };
        printed += &format!("{who}: {}\n", t.text);
    }
    ensure!(printed == case.log, "{}: transcript differs from the log", case.name);
    let logged_turns = case.log.lines().count();
    ensure!(session.turns.len() == logged_turns, "{}: {} turns, log has {logged_turns}", case.name, session.turns.len());
    ensure!(session.status == SessionStatus::Completed, "{}: status {:?}", case.name, session.status);
    let requests = session.turns.iter().filter(|t| t.kind == TurnKind::LoopbackConfirmRequest).count();
    ensure!(requests == case.confirmations, "{}: {requests} confirmation requests", case.name);
    ensure!(elapsed < Duration::from_secs(1), "{}: took {elapsed:?}", case.name);
    Ok(format!("{} {} turns/{} loopback in {:?}", case.name, session.turns.len(), requests, elapsed))
}

pub fn check() -> Verdict {
    let b1 = Case {
        name: "post-surgery",
        script: fixtures::POST_SURGERY_SCRIPT_JSON,
        log: fixtures::POST_SURGERY_TRANSCRIPT_TXT,
        profile: fixtures::john(),
        protocol: fixtures::post_surgery_protocol(),
        initiator: Initiator::Provider,
        confirmations: 1,
    };
    let b2 = Case {
        name: "daily-care",
        script: fixtures::DAILY_CARE_SCRIPT_JSON,
        log: fixtures::DAILY_CARE_TRANSCRIPT_TXT,
        profile: fixtures::mary(),
        protocol: fixtures::daily_care_protocol(),
        initiator: Initiator::Patient,
        confirmations: 0,
    };
    ensure!(b1.log.lines().count() == 15, "post-surgery log should hold 15 turns");
    let d1 = run(&b1)?;
    let d2 = run(&b2)?;

    // The one cycle in the post-surgery log is the pain-level-2 confirmation.
    let clock = Arc::new(ManualClock::new(timestamp_from_millis(0)));
    let engine = ConversationEngine::new(
        Arc::new(PromptEngine::default()),
        Arc::new(ScriptedBackend::from_json(b1.script).map_err(|e| e.to_string())?),
        Default::default(),
        EngineConfig::default(),
        clock,
    )
    .map_err(|e| e.to_string())?;
    let ctx = SessionContext { profile: &b1.profile, protocol: &b1.protocol };
    let mut s = engine.start(ctx, SessionId::new("b1"), Initiator::Provider).map_err(|e| e.to_string())?;
    for line in patient_lines(b1.log) {
        engine.patient_turn(ctx, &mut s, line).map_err(|e| e.to_string())?;
    }
    let request = s.turns.iter().position(|t| t.kind == TurnKind::LoopbackConfirmRequest).ok_or("no confirmation")?;
    ensure!(s.turns[request].text.contains('2'), "confirmation does not restate 2");
    ensure!(s.turns[request + 1].text == "Yes, that's correct.", "confirmation not followed by the affirmation");
    ensure!(
        s.collected_slots.get("pain_level") == Some(&SlotValue::Scalar(2)),
        "pain level not committed as 2: {:?}",
        s.collected_slots
    );
    Ok(format!("{d1}; {d2}"))
}
