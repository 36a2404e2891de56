//! Shared domain records for both the patient conversation side and the
//! provider review side. Nothing in here performs I/O.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, SubsecRound, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::engine::loopback::{classify_confirmation, value_mentioned, Confirmation};

macro_rules! opaque_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

opaque_id!(PatientId);
opaque_id!(ProtocolId);
opaque_id!(SessionId);
opaque_id!(ActionId);

/// Wall-clock instant, always UTC and truncated to milliseconds.
pub type Timestamp = DateTime<Utc>;

pub fn truncate_ms(t: Timestamp) -> Timestamp {
    t.trunc_subsecs(3)
}

pub fn timestamp_from_millis(ms: i64) -> Timestamp {
    Utc.timestamp_millis_opt(ms).single().unwrap_or_default()
}

/// RFC 3339 with exactly three fractional digits.
pub mod ms_time {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&raw)
            .map(|t| super::truncate_ms(t.with_timezone(&Utc)))
            .map_err(serde::de::Error::custom)
    }

    pub mod option {
        use chrono::{DateTime, Utc};
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(t: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
            match t {
                Some(t) => super::serialize(t, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<DateTime<Utc>>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(with = "super")] DateTime<Utc>);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: PatientId,
    pub name: String,
    pub age: u32,
    pub gender: String,
    pub living_situation: String,
    #[serde(default)]
    pub conditions: Vec<String>,
    #[serde(default)]
    pub medical_history: Vec<String>,
}

impl PatientProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.patient_id.as_str().trim().is_empty() {
            return Err("patient_id must not be empty".into());
        }
        if self.age == 0 {
            return Err("age must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    #[serde(rename = "scalar_1_to_10")]
    Scalar1To10,
    FreeText,
    YesNo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySlot {
    pub slot_name: String,
    pub description: String,
    pub value_kind: ValueKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationProtocol {
    pub protocol_id: ProtocolId,
    pub task_summary: String,
    pub question_protocol: Vec<String>,
    #[serde(default)]
    pub key_information: Vec<KeySlot>,
}

impl ConversationProtocol {
    pub fn validate(&self) -> Result<(), String> {
        if self.protocol_id.as_str().trim().is_empty() {
            return Err("protocol_id must not be empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for slot in &self.key_information {
            if !seen.insert(slot.slot_name.as_str()) {
                return Err(format!("duplicate key_information slot `{}`", slot.slot_name));
            }
        }
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Option<&KeySlot> {
        self.key_information.iter().find(|s| s.slot_name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Patient,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    Normal,
    LoopbackConfirmRequest,
    LoopbackConfirmResponse,
    Reprompt,
    Closing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_index: usize,
    pub speaker: Speaker,
    pub text: String,
    #[serde(with = "ms_time")]
    pub timestamp: Timestamp,
    pub kind: TurnKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initiator {
    Patient,
    Provider,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    AwaitingConfirmation,
    Paused,
    Completed,
    Aborted,
}

impl SessionStatus {
    pub const ALL: [SessionStatus; 5] = [
        SessionStatus::Active,
        SessionStatus::AwaitingConfirmation,
        SessionStatus::Paused,
        SessionStatus::Completed,
        SessionStatus::Aborted,
    ];

    pub fn is_closed(self) -> bool {
        matches!(self, SessionStatus::Completed | SessionStatus::Aborted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Active => "active",
            SessionStatus::AwaitingConfirmation => "awaiting_confirmation",
            SessionStatus::Paused => "paused",
            SessionStatus::Completed => "completed",
            SessionStatus::Aborted => "aborted",
        }
    }
}

impl std::str::FromStr for SessionStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown session status `{s}`"))
    }
}

/// A value captured for a key-information slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotValue {
    Scalar(u8),
    YesNo(bool),
    Text(String),
}

impl fmt::Display for SlotValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotValue::Scalar(v) => write!(f, "{v}"),
            SlotValue::YesNo(true) => f.write_str("yes"),
            SlotValue::YesNo(false) => f.write_str("no"),
            SlotValue::Text(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingLoopback {
    pub slot_name: String,
    pub candidate_value: SlotValue,
    /// Index of the assistant question the candidate answers.
    pub question_turn: usize,
    /// How many times the confirmation was re-asked after an unclear answer.
    #[serde(default)]
    pub reasks: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub patient_id: PatientId,
    pub protocol_id: ProtocolId,
    pub initiator: Initiator,
    #[serde(default)]
    pub turns: Vec<Turn>,
    pub status: SessionStatus,
    #[serde(default)]
    pub pending_loopback: Option<PendingLoopback>,
    #[serde(default)]
    pub collected_slots: BTreeMap<String, SlotValue>,
    #[serde(with = "ms_time")]
    pub created_at: Timestamp,
    #[serde(default, with = "ms_time::option")]
    pub closed_at: Option<Timestamp>,
}

impl Session {
    pub fn new(
        session_id: SessionId,
        patient_id: PatientId,
        protocol_id: ProtocolId,
        initiator: Initiator,
        created_at: Timestamp,
    ) -> Self {
        Self {
            session_id,
            patient_id,
            protocol_id,
            initiator,
            turns: Vec::new(),
            status: SessionStatus::Active,
            pending_loopback: None,
            collected_slots: BTreeMap::new(),
            created_at: truncate_ms(created_at),
            closed_at: None,
        }
    }

    /// Appends a turn with the next index and returns a copy of it.
    pub fn push_turn(
        &mut self,
        speaker: Speaker,
        kind: TurnKind,
        text: impl Into<String>,
        at: Timestamp,
    ) -> Turn {
        let turn = Turn {
            turn_index: self.turns.len(),
            speaker,
            text: text.into(),
            timestamp: truncate_ms(at),
            kind,
        };
        self.turns.push(turn.clone());
        turn
    }

    pub fn last_turn(&self) -> Option<&Turn> {
        self.turns.last()
    }

    /// The most recent assistant turn that is not a re-prompt.
    pub fn last_assistant_question(&self) -> Option<&Turn> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.speaker == Speaker::Assistant && t.kind != TurnKind::Reprompt)
    }

    pub fn last_patient_utterance(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.speaker == Speaker::Patient)
            .map(|t| t.text.as_str())
    }

    pub fn patient_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.speaker == Speaker::Patient)
    }
}

/// Renders a transcript the way both appendix logs are laid out.
pub fn render_transcript(turns: &[Turn]) -> String {
    let mut out = String::new();
    for t in turns {
        let who = match t.speaker {
            Speaker::Patient => "Patient",
            Speaker::Assistant => "Voice Assistant",
        };
        out.push_str(who);
        out.push_str(": ");
        out.push_str(&t.text);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymptomDetail {
    pub label: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalSummary {
    pub session_id: SessionId,
    pub chief_concern: String,
    pub symptom_details: Vec<SymptomDetail>,
    #[serde(default)]
    pub patient_questions: Vec<String>,
    #[serde(default)]
    pub additional_notes: Vec<String>,
    pub raw_model_output: String,
    /// Set when one or more clinical-note sections could not be found.
    #[serde(default)]
    pub parse_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightSpan {
    pub session_id: SessionId,
    pub turn_index: usize,
    /// Offsets count Unicode scalar values, not bytes.
    pub char_start: usize,
    pub char_end: usize,
    pub quote: String,
}

/// The highlight stage output: anchored spans plus the model text and the
/// number of quotes that could not be placed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightReport {
    pub session_id: SessionId,
    pub spans: Vec<HighlightSpan>,
    pub dropped_quotes: usize,
    pub raw_model_output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    Moderate,
    High,
}

impl RiskLevel {
    pub const ALL: [RiskLevel; 3] = [RiskLevel::Low, RiskLevel::Moderate, RiskLevel::High];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskLevel::Low => "low",
            RiskLevel::Moderate => "moderate",
            RiskLevel::High => "high",
        }
    }

    /// Dashboard dot color.
    pub fn color(self) -> &'static str {
        match self {
            RiskLevel::Low => "green",
            RiskLevel::Moderate => "yellow",
            RiskLevel::High => "red",
        }
    }
}

impl std::str::FromStr for RiskLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RiskLevel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown risk level `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskAssessment {
    pub session_id: SessionId,
    pub level: Option<RiskLevel>,
    pub reasoning: String,
    pub needs_human_review: bool,
    pub raw_model_output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Note,
    FollowUpCall,
    ScheduleVisit,
    Escalate,
    MarkDone,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderAction {
    pub action_id: ActionId,
    pub session_id: SessionId,
    pub author: String,
    pub kind: ActionKind,
    #[serde(default)]
    pub body: String,
    #[serde(with = "ms_time")]
    pub timestamp: Timestamp,
}

/// Checks every session-level invariant and describes each violation.
/// An empty result means the session is well formed.
pub fn validate_session(session: &Session) -> Vec<String> {
    let mut violations = Vec::new();

    let awaiting = session.status == SessionStatus::AwaitingConfirmation;
    match (awaiting, session.pending_loopback.is_some()) {
        (true, false) => violations
            .push("status is awaiting_confirmation but no loopback candidate is pending".into()),
        (false, true) => violations.push(format!(
            "loopback candidate pending while status is {}",
            session.status.as_str()
        )),
        _ => {}
    }

    for (pos, turn) in session.turns.iter().enumerate() {
        if turn.turn_index != pos {
            violations.push(format!(
                "turn at position {pos} has index {} (expected {pos})",
                turn.turn_index
            ));
        }
    }

    for pair in session.turns.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        if prev.speaker == cur.speaker {
            let reprompt = cur.speaker == Speaker::Assistant && cur.kind == TurnKind::Reprompt;
            if !reprompt {
                violations.push(format!(
                    "turns {} and {} are both spoken by the {:?}",
                    prev.turn_index, cur.turn_index, cur.speaker
                ));
            }
        }
        if cur.timestamp < prev.timestamp {
            violations.push(format!("turn {} is older than turn {}", cur.turn_index, prev.turn_index));
        }
    }

    for turn in &session.turns {
        let ok = match turn.kind {
            TurnKind::LoopbackConfirmResponse => turn.speaker == Speaker::Patient,
            TurnKind::Normal => true,
            _ => turn.speaker == Speaker::Assistant,
        };
        if !ok {
            violations.push(format!(
                "turn {} has kind {:?} but was spoken by the {:?}",
                turn.turn_index, turn.kind, turn.speaker
            ));
        }
    }

    for (slot, value) in &session.collected_slots {
        if let SlotValue::Scalar(v) = value {
            if !(1..=10).contains(v) {
                violations.push(format!("slot `{slot}` holds out-of-range scalar {v}"));
            }
            if !scalar_was_confirmed(&session.turns, *v) {
                violations.push(format!(
                    "slot `{slot}` = {v} was committed without a loopback confirmation"
                ));
            }
        }
    }

    if let Some(pending) = &session.pending_loopback {
        if pending.question_turn >= session.turns.len() {
            violations.push("pending loopback refers to a turn that does not exist".into());
        }
    }

    match (session.status.is_closed(), session.closed_at.is_some()) {
        (true, false) => violations.push("closed session has no closed_at timestamp".into()),
        (false, true) => violations.push("open session carries a closed_at timestamp".into()),
        _ => {}
    }

    violations
}

fn scalar_was_confirmed(turns: &[Turn], value: u8) -> bool {
    turns.windows(2).any(|pair| {
        pair[0].kind == TurnKind::LoopbackConfirmRequest
            && pair[0].speaker == Speaker::Assistant
            && value_mentioned(&pair[0].text, value)
            && pair[1].kind == TurnKind::LoopbackConfirmResponse
            && classify_confirmation(&pair[1].text) == Confirmation::Affirmed
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn appendix_post_surgery_session_is_valid() {
        let session = fixtures::post_surgery_session();
        assert_eq!(validate_session(&session), Vec::<String>::new());
        assert_eq!(session.turns.len(), 15);
    }

    #[test]
    fn appendix_daily_care_session_is_valid() {
        let session = fixtures::daily_care_session();
        assert!(validate_session(&session).is_empty());
    }

    #[test]
    fn awaiting_without_pending_is_one_violation() {
        let mut session = fixtures::post_surgery_session();
        session.status = SessionStatus::AwaitingConfirmation;
        session.closed_at = None;
        let v = validate_session(&session);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("awaiting_confirmation"));
    }

    #[test]
    fn unconfirmed_scalar_is_one_violation() {
        let mut session = fixtures::post_surgery_session();
        // Turn the confirmation request into an ordinary question.
        session.turns[6].kind = TurnKind::Normal;
        session.turns[7].kind = TurnKind::Normal;
        let v = validate_session(&session);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("pain_level"));
    }

    #[test]
    fn negative_confirmation_does_not_count() {
        let mut session = fixtures::post_surgery_session();
        session.turns[7].text = "No, that's wrong.".into();
        assert_eq!(validate_session(&session).len(), 1);
    }

    #[test]
    fn index_gap_detected() {
        let mut session = fixtures::daily_care_session();
        session.turns[3].turn_index = 7;
        let v = validate_session(&session);
        assert!(v.iter().any(|m| m.contains("index 7")));
    }

    #[test]
    fn consecutive_reprompt_allowed_but_double_patient_not() {
        let mut session = fixtures::daily_care_session();
        session.status = SessionStatus::Active;
        session.closed_at = None;
        session.turns.truncate(4);
        let at = session.turns[3].timestamp;
        session.push_turn(Speaker::Assistant, TurnKind::Reprompt, "Are you still there?", at);
        assert!(validate_session(&session).is_empty());
        session.push_turn(Speaker::Patient, TurnKind::Normal, "yes", at);
        session.push_turn(Speaker::Patient, TurnKind::Normal, "again", at);
        assert_eq!(validate_session(&session).len(), 1);
    }

    #[test]
    fn timestamps_serialize_with_millis() {
        let t = timestamp_from_millis(1_700_000_000_123);
        let turn = Turn {
            turn_index: 0,
            speaker: Speaker::Patient,
            text: "hi".into(),
            timestamp: t,
            kind: TurnKind::Normal,
        };
        let json = serde_json::to_value(&turn).unwrap();
        assert_eq!(json["timestamp"], "2023-11-14T22:13:20.123Z");
        assert_eq!(json["kind"], "normal");
    }

    #[test]
    fn value_kind_wire_names() {
        let json = serde_json::to_string(&ValueKind::Scalar1To10).unwrap();
        assert_eq!(json, "\"scalar_1_to_10\"");
    }

    #[test]
    fn duplicate_slot_names_rejected() {
        let mut protocol = fixtures::post_surgery_protocol();
        let dup = protocol.key_information[0].clone();
        protocol.key_information.push(dup);
        assert!(protocol.validate().is_err());
    }

    #[test]
    fn zero_age_rejected() {
        let mut p = fixtures::mary();
        p.age = 0;
        assert!(p.validate().is_err());
    }
}
