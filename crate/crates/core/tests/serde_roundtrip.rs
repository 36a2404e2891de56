use carelink_core::domain::{
    timestamp_from_millis, ClinicalSummary, HighlightSpan, PatientProfile, RiskAssessment, RiskLevel, Session,
    SessionId, SlotValue, Speaker, SymptomDetail, TurnKind,
};
use carelink_core::fixtures;
use proptest::prelude::*;

fn roundtrip<T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug>(value: &T) {
    let json = serde_json::to_string(value).unwrap();
    let back: T = serde_json::from_str(&json).unwrap();
    assert_eq!(&back, value);
    assert_eq!(serde_json::to_string(&back).unwrap(), json);
}

proptest! {
    #[test]
    fn patient_profiles(name in "\\PC{1,30}", age in 1u32..120, conditions in prop::collection::vec("\\PC{0,20}", 0..4)) {
        roundtrip(&PatientProfile {
            patient_id: "p".into(),
            name,
            age,
            gender: "female".into(),
            living_situation: "Lives alone".into(),
            conditions,
            medical_history: vec![],
        });
    }

    #[test]
    fn sessions_with_random_turns(texts in prop::collection::vec("\\PC{0,60}", 0..12), ms in 0i64..4_000_000_000_000, value in 1u8..=10) {
        let mut s = fixtures::post_surgery_session();
        s.turns.clear();
        for (i, t) in texts.iter().enumerate() {
            let speaker = if i % 2 == 0 { Speaker::Assistant } else { Speaker::Patient };
            s.push_turn(speaker, TurnKind::Normal, t.clone(), timestamp_from_millis(ms + i as i64 * 1000));
        }
        s.collected_slots.insert("pain_level".into(), SlotValue::Scalar(value));
        s.collected_slots.insert("notes".into(), SlotValue::Text("x".into()));
        s.created_at = timestamp_from_millis(ms);
        roundtrip::<Session>(&s);
    }

    #[test]
    fn artifacts(text in "\\PC{0,80}", start in 0usize..50, len in 0usize..50, level in 0usize..4) {
        let id = SessionId::new("s");
        roundtrip(&ClinicalSummary {
            session_id: id.clone(),
            chief_concern: text.clone(),
            symptom_details: vec![SymptomDetail { label: text.clone(), value: text.clone() }],
            patient_questions: vec![text.clone()],
            additional_notes: vec![],
            raw_model_output: text.clone(),
            parse_warning: level == 0,
        });
        roundtrip(&HighlightSpan { session_id: id.clone(), turn_index: 1, char_start: start, char_end: start + len, quote: text.clone() });
        roundtrip(&RiskAssessment {
            session_id: id,
            level: RiskLevel::ALL.get(level).copied(),
            reasoning: text.clone(),
            needs_human_review: level == 3,
            raw_model_output: text,
        });
    }
}

#[test]
fn fixture_sessions_roundtrip() {
    roundtrip(&fixtures::post_surgery_session());
    roundtrip(&fixtures::daily_care_session());
}
