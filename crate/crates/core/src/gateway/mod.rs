//! Completion interface over interchangeable model backends.

mod live;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{Message, PromptBundle};

pub use live::{LiveBackend, LiveConfig};
pub use scripted::{MatchKey, ScriptedBackend, ScriptedExchange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    #[default]
    Question,
    Summary,
    Highlight,
    Risk,
}

impl Purpose {
    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Question => "question",
            Purpose::Summary => "summary",
            Purpose::Highlight => "highlight",
            Purpose::Risk => "risk",
        }
    }
}

/// Caller-side metadata. Never sent to a live endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestContext {
    pub purpose: Purpose,
    pub round: Option<usize>,
    pub last_patient_utterance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub temperature: f32,
    pub max_output_tokens: u32,
    pub backend_id: String,
    #[serde(default)]
    pub context: RequestContext,
}

impl CompletionRequest {
    pub fn from_bundle(bundle: &PromptBundle, settings: &GenerationSettings, context: RequestContext) -> Self {
        let temperature = match context.purpose {
            Purpose::Question => settings.question_temperature,
            _ => settings.extraction_temperature,
        };
        Self {
            messages: bundle.assembled.clone(),
            temperature,
            max_output_tokens: settings.max_output_tokens,
            backend_id: settings.backend_id.clone(),
            context,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        Ok(())
    }
}

/// Decoding parameters per call type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub question_temperature: f32,
    pub extraction_temperature: f32,
    pub max_output_tokens: u32,
    pub backend_id: String,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            question_temperature: 0.7,
            extraction_temperature: 0.0,
            max_output_tokens: 512,
            backend_id: "default".into(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("model backend timed out")]
    Timeout,
    #[error("model backend rate limit exceeded")]
    RateLimited,
    #[error("model backend rejected credentials: {0}")]
    Auth(String),
    #[error("malformed model response: {0}")]
    MalformedResponse(String),
    #[error("model backend server error (HTTP {0})")]
    Server(u16),
    #[error("model backend rejected the request (HTTP {0})")]
    Rejected(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no scripted response for {0}")]
    ScriptedMiss(String),
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("model backend not configured: {0}")]
    NotConfigured(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Timeout | GatewayError::RateLimited | GatewayError::Server(_) | GatewayError::Transport(_)
        )
    }
}

pub trait CompletionBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for std::sync::Arc<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request)
    }
}

/// Builds the live backend from `LLM_BASE_URL`, `LLM_MODEL` and `LLM_API_KEY`.
pub fn live_backend_from_env() -> Result<LiveBackend, GatewayError> {
    LiveBackend::new(LiveConfig::from_env()?)
}
