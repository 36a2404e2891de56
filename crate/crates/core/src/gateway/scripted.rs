use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CompletionBackend, CompletionRequest, GatewayError, Purpose};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKey {
    /// Exact text of the last patient utterance in the request.
    Utterance(String),
    /// 0-based reply index: `round - 1` for questions, always 0 for the
    /// provider-side stages.
    Ordinal(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedExchange {
    #[serde(default)]
    pub purpose: Purpose,
    pub match_key: MatchKey,
    pub response: String,
}

/// Replays fixed responses. A request that matches nothing is an error;
/// there is no fallback text.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    id: String,
    responses: HashMap<(Purpose, MatchKey), String>,
}

impl ScriptedBackend {
    pub fn new(exchanges: Vec<ScriptedExchange>) -> Result<Self, GatewayError> {
        let mut responses = HashMap::new();
        for ex in exchanges {
            let key = (ex.purpose, ex.match_key);
            if responses.insert(key.clone(), ex.response).is_some() {
                return Err(GatewayError::InvalidScript(format!(
                    "duplicate {} match key {:?}",
                    key.0.as_str(),
                    key.1
                )));
            }
        }
        Ok(Self { id: "scripted".into(), responses })
    }

    pub fn from_json(json: &str) -> Result<Self, GatewayError> {
        let exchanges: Vec<ScriptedExchange> =
            serde_json::from_str(json).map_err(|e| GatewayError::InvalidScript(e.to_string()))?;
        Self::new(exchanges)
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::InvalidScript(format!("{}: {e}", path.display())))?;
        Self::from_json(&json)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let ctx = &request.context;
        if let Some(utterance) = &ctx.last_patient_utterance {
            if let Some(r) = self.responses.get(&(ctx.purpose, MatchKey::Utterance(utterance.clone()))) {
                return Ok(r.clone());
            }
        }
        let ordinal = match ctx.purpose {
            Purpose::Question => ctx.round.unwrap_or(1).saturating_sub(1),
            _ => 0,
        };
        self.responses
            .get(&(ctx.purpose, MatchKey::Ordinal(ordinal)))
            .cloned()
            .ok_or_else(|| {
                GatewayError::ScriptedMiss(format!(
                    "{} request (round {}, utterance {})",
                    ctx.purpose.as_str(),
                    ctx.round.map_or("-".to_owned(), |r| r.to_string()),
                    if ctx.last_patient_utterance.is_some() { "given" } else { "absent" }
                ))
            })
    }
}
