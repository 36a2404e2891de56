//! Bundled reference data: the two scenario patients and protocols, the
//! two reference conversation logs, persona files and scripted model
//! responses that replay them.

use std::collections::BTreeMap;

use chrono::Duration;
use serde::Deserialize;

use crate::domain::{
    timestamp_from_millis, ConversationProtocol, Initiator, PatientProfile, Session, SessionId,
    SessionStatus, SlotValue, Speaker, TurnKind,
};

pub const PATIENTS_JSON: &str = include_str!("../fixtures/patients.json");
pub const PROTOCOLS_JSON: &str = include_str!("../fixtures/protocols.json");
pub const POST_SURGERY_TRANSCRIPT_JSON: &str = include_str!("../fixtures/post_surgery_transcript.json");
pub const DAILY_CARE_TRANSCRIPT_JSON: &str = include_str!("../fixtures/daily_care_transcript.json");
pub const POST_SURGERY_TRANSCRIPT_TXT: &str = include_str!("../fixtures/post_surgery_transcript.txt");
pub const DAILY_CARE_TRANSCRIPT_TXT: &str = include_str!("../fixtures/daily_care_transcript.txt");
pub const POST_SURGERY_PERSONA_JSON: &str = include_str!("../fixtures/post_surgery_persona.json");
pub const DAILY_CARE_PERSONA_JSON: &str = include_str!("../fixtures/daily_care_persona.json");
pub const POST_SURGERY_SCRIPT_JSON: &str = include_str!("../fixtures/post_surgery_script.json");
pub const DAILY_CARE_SCRIPT_JSON: &str = include_str!("../fixtures/daily_care_script.json");

pub const POST_SURGERY_SESSION_ID: &str = "session-post-surgery";
pub const DAILY_CARE_SESSION_ID: &str = "session-daily-care";

/// 2024-03-04T10:00:00Z; fixture turns are 30 s apart.
const FIXTURE_EPOCH_MS: i64 = 1_709_546_400_000;

#[derive(Debug, Clone, Deserialize)]
pub struct FixtureTurn {
    pub speaker: Speaker,
    pub kind: TurnKind,
    pub text: String,
}

fn parse<T: for<'de> Deserialize<'de>>(name: &str, json: &str) -> T {
    serde_json::from_str(json).unwrap_or_else(|e| panic!("bundled fixture {name} is malformed: {e}"))
}

pub fn patients() -> Vec<PatientProfile> {
    parse("patients.json", PATIENTS_JSON)
}

pub fn protocols() -> Vec<ConversationProtocol> {
    parse("protocols.json", PROTOCOLS_JSON)
}

fn patient(id: &str) -> PatientProfile {
    patients().into_iter().find(|p| p.patient_id.as_str() == id).expect("bundled patient")
}

fn protocol(id: &str) -> ConversationProtocol {
    protocols().into_iter().find(|p| p.protocol_id.as_str() == id).expect("bundled protocol")
}

pub fn john() -> PatientProfile {
    patient("patient-john")
}

pub fn mary() -> PatientProfile {
    patient("patient-mary")
}

pub fn post_surgery_protocol() -> ConversationProtocol {
    protocol("post-surgery")
}

pub fn daily_care_protocol() -> ConversationProtocol {
    protocol("daily-care")
}

pub fn post_surgery_turns() -> Vec<FixtureTurn> {
    parse("post_surgery_transcript.json", POST_SURGERY_TRANSCRIPT_JSON)
}

pub fn daily_care_turns() -> Vec<FixtureTurn> {
    parse("daily_care_transcript.json", DAILY_CARE_TRANSCRIPT_JSON)
}

fn completed_session(
    id: &str,
    profile: &PatientProfile,
    protocol: &ConversationProtocol,
    initiator: Initiator,
    turns: Vec<FixtureTurn>,
    offset_minutes: i64,
    collected: BTreeMap<String, SlotValue>,
) -> Session {
    let start = timestamp_from_millis(FIXTURE_EPOCH_MS) + Duration::minutes(offset_minutes);
    let mut session = Session::new(
        SessionId::new(id),
        profile.patient_id.clone(),
        protocol.protocol_id.clone(),
        initiator,
        start,
    );
    for (i, t) in turns.into_iter().enumerate() {
        session.push_turn(t.speaker, t.kind, t.text, start + Duration::seconds(30 * i as i64));
    }
    session.status = SessionStatus::Completed;
    session.collected_slots = collected;
    session.closed_at = session.last_turn().map(|t| t.timestamp);
    session
}

/// The provider-initiated post-surgery follow-up, as logged.
pub fn post_surgery_session() -> Session {
    completed_session(
        POST_SURGERY_SESSION_ID,
        &john(),
        &post_surgery_protocol(),
        Initiator::Provider,
        post_surgery_turns(),
        0,
        BTreeMap::from([("pain_level".to_owned(), SlotValue::Scalar(2))]),
    )
}

/// The patient-initiated daily-care conversation, as logged.
pub fn daily_care_session() -> Session {
    completed_session(
        DAILY_CARE_SESSION_ID,
        &mary(),
        &daily_care_protocol(),
        Initiator::Patient,
        daily_care_turns(),
        60,
        BTreeMap::new(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixtures_parse() {
        assert_eq!(patients().len(), 2);
        assert_eq!(protocols().len(), 2);
        assert_eq!(post_surgery_turns().len(), 15);
        assert_eq!(daily_care_turns().len(), 12);
        for p in protocols() {
            p.validate().unwrap();
        }
    }

    #[test]
    fn text_renderings_match_json() {
        assert_eq!(
            crate::domain::render_transcript(&post_surgery_session().turns),
            POST_SURGERY_TRANSCRIPT_TXT
        );
        assert_eq!(
            crate::domain::render_transcript(&daily_care_session().turns),
            DAILY_CARE_TRANSCRIPT_TXT
        );
    }
}
