use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use carelink_core::pipeline::PipelineError;
use carelink_core::prompt::PromptError;
use carelink_core::{EngineError, StoreError};
use serde_json::json;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or unknown bearer token")
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = self.code, message = %self.message, "request failed");
        }
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound { .. } => ApiError::not_found(e.to_string()),
            StoreError::Conflict(_) => ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string()),
            StoreError::Validation(_) => ApiError::validation(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

fn prompt_error(e: PromptError) -> ApiError {
    match e {
        PromptError::Precondition(_) => ApiError::new(StatusCode::CONFLICT, "lifecycle_conflict", e.to_string()),
        _ => ApiError::internal(e.to_string()),
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Lifecycle { .. } => ApiError::new(StatusCode::CONFLICT, "lifecycle_conflict", e.to_string()),
            EngineError::RoundLimit(_) => ApiError::new(StatusCode::CONFLICT, "round_limit", e.to_string()),
            EngineError::Gateway(_) => ApiError::new(StatusCode::BAD_GATEWAY, "model_unavailable", e.to_string()),
            EngineError::Prompt(p) => prompt_error(p),
            EngineError::NotFound(_) => ApiError::not_found(e.to_string()),
            EngineError::Configuration(_) => ApiError::internal(e.to_string()),
            EngineError::Store(s) => s.into(),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NotFound(_) => ApiError::not_found(e.to_string()),
            PipelineError::NotCompleted(_) => ApiError::new(StatusCode::CONFLICT, "lifecycle_conflict", e.to_string()),
            PipelineError::Gateway(_) => ApiError::new(StatusCode::BAD_GATEWAY, "model_unavailable", e.to_string()),
            PipelineError::Prompt(p) => prompt_error(p),
            PipelineError::Store(s) => s.into(),
        }
    }
}
