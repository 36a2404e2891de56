//! Persona files drive `simulate`: who is talking, under which protocol, and
//! what they say. An utterance is either a bare string or
//! `{"text": ..., "delay_secs": N}`, where the delay is virtual silence
//! before the patient answers.

use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
pub struct Persona {
    #[serde(default)]
    pub patient_id: Option<String>,
    #[serde(default)]
    pub protocol_id: Option<String>,
    #[serde(default)]
    pub initiator: Option<String>,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Utterance {
    Text(String),
    Timed {
        text: String,
        #[serde(default)]
        delay_secs: u64,
    },
}

impl Utterance {
    pub fn text(&self) -> &str {
        match self {
            Utterance::Text(t) | Utterance::Timed { text: t, .. } => t,
        }
    }

    pub fn delay_secs(&self) -> u64 {
        match self {
            Utterance::Text(_) => 0,
            Utterance::Timed { delay_secs, .. } => *delay_secs,
        }
    }
}

/// Reads a persona. A bare JSON array of utterances is accepted too.
pub fn load(path: &Path) -> Result<Persona, String> {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    if raw.trim().is_empty() {
        return Err(format!("persona file {} is empty", path.display()));
    }
    parse(&raw).map_err(|e| format!("persona file {}: {e}", path.display()))
}

pub fn parse(raw: &str) -> Result<Persona, String> {
    let persona = match serde_json::from_str::<Vec<Utterance>>(raw) {
        Ok(utterances) => Persona { patient_id: None, protocol_id: None, initiator: None, utterances },
        Err(_) => serde_json::from_str::<Persona>(raw).map_err(|e| e.to_string())?,
    };
    if persona.utterances.is_empty() {
        return Err("no utterances".into());
    }
    if let Some(i) = persona.utterances.iter().position(|u| u.text().trim().is_empty()) {
        return Err(format!("utterance {i} is blank"));
    }
    Ok(persona)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_utterance_forms() {
        let p = parse(r#"{"utterances": ["hi", {"text": "later", "delay_secs": 90}]}"#).unwrap();
        assert_eq!(p.utterances[0], Utterance::Text("hi".into()));
        assert_eq!(p.utterances[1].delay_secs(), 90);
        assert_eq!(p.utterances[1].text(), "later");
    }

    #[test]
    fn bare_array() {
        let p = parse(r#"["one", "two"]"#).unwrap();
        assert_eq!(p.utterances.len(), 2);
        assert!(p.protocol_id.is_none());
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(parse("[]").is_err());
        assert!(parse(r#"{"utterances": []}"#).is_err());
        assert!(parse(r#"["  "]"#).is_err());
        assert!(parse("{}").is_err());
    }

    #[test]
    fn bundled_personas_parse() {
        for raw in [carelink_core::fixtures::POST_SURGERY_PERSONA_JSON, carelink_core::fixtures::DAILY_CARE_PERSONA_JSON] {
            let p = parse(raw).unwrap();
            assert!(p.protocol_id.is_some());
        }
    }
}
