use std::convert::Infallible;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{FromRequest, FromRequestParts, Path, Request, State};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::Json;
use carelink_core::domain::{
    ActionId, ActionKind, ClinicalSummary, ConversationProtocol, HighlightReport, Initiator, PatientId,
    PatientProfile, ProtocolId, ProviderAction, RiskAssessment, RiskLevel, Session, SessionId, SessionStatus, Turn,
};
use carelink_core::pipeline::ProcessingReport;
use carelink_core::store::{InfoStore, Page, PageRequest, ProcessingRecord, SessionFilter, SessionListing, Versioned};
use carelink_core::PauseOutcome;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

use crate::auth::Principal;
use crate::error::ApiError;
use crate::AppState;

/// JSON body whose rejections become 422 responses in the API's error shape.
pub struct ApiJson<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(ApiJson(v)),
            Err(e) => Err(ApiError::validation(e.body_text())),
        }
    }
}

pub struct ApiQuery<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequestParts<S> for ApiQuery<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        axum::extract::Query::<T>::from_request_parts(parts, state)
            .await
            .map(|q| ApiQuery(q.0))
            .map_err(|e: QueryRejection| ApiError::validation(e.body_text()))
    }
}

/// An optional JSON body: empty means the defaults.
fn optional_json<T: DeserializeOwned + Default>(body: &[u8]) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid JSON body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn session_for(store: &InfoStore, principal: &Principal, id: &SessionId) -> Result<Session, ApiError> {
    let session = store.get_session(id)?;
    principal.require_access(&session.patient_id)?;
    Ok(session)
}

/// Runs the provider pipeline in the background once a session completes.
fn after_update(state: &AppState, session: &Session) {
    if !state.auto_process || session.status != SessionStatus::Completed {
        return;
    }
    let pipeline = state.pipeline.clone();
    let id = session.session_id.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = pipeline.process_session(&id, false) {
            tracing::warn!(session = %id, error = %e, "background processing failed");
        }
    });
}

pub async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Deserialize)]
pub struct StartSession {
    #[serde(default)]
    pub patient_id: Option<PatientId>,
    pub protocol_id: ProtocolId,
    #[serde(default)]
    pub initiator: Option<Initiator>,
}

pub async fn start_session(
    State(state): State<AppState>,
    principal: Principal,
    ApiJson(body): ApiJson<StartSession>,
) -> Result<(StatusCode, Json<Session>), ApiError> {
    let (patient, initiator) = match &principal {
        Principal::Provider => (
            body.patient_id.ok_or_else(|| ApiError::validation("patient_id is required"))?,
            body.initiator.unwrap_or(Initiator::Provider),
        ),
        Principal::Patient(own) => {
            let patient = body.patient_id.unwrap_or_else(|| own.clone());
            principal.require_access(&patient)?;
            if body.initiator == Some(Initiator::Provider) {
                return Err(ApiError::forbidden("patients cannot start provider-initiated sessions"));
            }
            (patient, Initiator::Patient)
        }
    };
    let service = state.sessions.clone();
    let session = blocking(move || Ok(service.start_session(&patient, &body.protocol_id, initiator)?)).await?;
    Ok((StatusCode::CREATED, Json(session)))
}

pub async fn get_session(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<SessionId>,
) -> Result<Json<Session>, ApiError> {
    let store = state.store.clone();
    Ok(Json(blocking(move || session_for(&store, &principal, &id)).await?))
}

#[derive(Debug, Deserialize)]
pub struct PatientTurn {
    pub text: String,
}

#[derive(Debug, Serialize)]
pub struct TurnResponse {
    pub reply: Turn,
    pub session: Session,
}

pub async fn patient_turn(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<SessionId>,
    ApiJson(body): ApiJson<PatientTurn>,
) -> Result<Json<TurnResponse>, ApiError> {
    let text = body.text.trim().to_owned();
    if text.is_empty() {
        return Err(ApiError::validation("text must not be empty"));
    }
    let (store, service) = (state.store.clone(), state.sessions.clone());
    let (reply, session) = blocking(move || {
        session_for(&store, &principal, &id)?;
        Ok(service.patient_turn(&id, &text)?)
    })
    .await?;
    after_update(&state, &session);
    Ok(Json(TurnResponse { reply, session }))
}

#[derive(Debug, Serialize)]
pub struct PauseResponse {
    pub outcome: &'static str,
    pub reprompt: Option<Turn>,
    pub session: Session,
}

pub async fn pause(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<SessionId>,
) -> Result<Json<PauseResponse>, ApiError> {
    let (store, service) = (state.store.clone(), state.sessions.clone());
    let (outcome, session) = blocking(move || {
        session_for(&store, &principal, &id)?;
        Ok(service.pause(&id)?)
    })
    .await?;
    let (outcome, reprompt) = match outcome {
        PauseOutcome::NotDue => ("not_due", None),
        PauseOutcome::Reprompted(t) => ("reprompted", Some(t)),
        PauseOutcome::Paused => ("paused", None),
    };
    Ok(Json(PauseResponse { outcome, reprompt, session }))
}

#[derive(Debug, Default, Deserialize)]
pub struct CloseSession {
    #[serde(default)]
    pub abort: bool,
}

pub async fn close_session(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<SessionId>,
    body: Bytes,
) -> Result<Json<Session>, ApiError> {
    let abort = optional_json::<CloseSession>(&body)?.abort;
    let (store, service) = (state.store.clone(), state.sessions.clone());
    let session = blocking(move || {
        session_for(&store, &principal, &id)?;
        Ok(service.close(&id, abort)?)
    })
    .await?;
    after_update(&state, &session);
    Ok(Json(session))
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    pub patient_id: Option<PatientId>,
    pub status: Option<SessionStatus>,
    pub risk: Option<RiskLevel>,
    pub done: Option<bool>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

pub async fn list_sessions(
    State(state): State<AppState>,
    principal: Principal,
    ApiQuery(q): ApiQuery<ListQuery>,
) -> Result<Json<Page<SessionListing>>, ApiError> {
    principal.require_provider()?;
    let filter = SessionFilter { patient_id: q.patient_id, status: q.status, risk: q.risk, done: q.done };
    let page = PageRequest::new(q.offset.unwrap_or(0), q.limit.unwrap_or(PageRequest::DEFAULT_LIMIT));
    let store = state.store.clone();
    Ok(Json(blocking(move || Ok(store.list_sessions(&filter, page)?)).await?))
}

/// Everything the provider's session view needs.
#[derive(Debug, Serialize)]
pub struct SessionDetail {
    pub session: Session,
    pub patient: Option<PatientProfile>,
    pub summary: Option<Versioned<ClinicalSummary>>,
    pub highlights: Option<Versioned<HighlightReport>>,
    pub risk: Option<Versioned<RiskAssessment>>,
    pub risk_color: Option<String>,
    pub processing: Option<ProcessingRecord>,
    pub actions: Vec<ProviderAction>,
    pub done: bool,
}

pub async fn session_detail(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<SessionId>,
) -> Result<Json<SessionDetail>, ApiError> {
    principal.require_provider()?;
    let store = state.store.clone();
    let detail = blocking(move || {
        let session = store.get_session(&id)?;
        let risk = store.get_risk(&id)?;
        let actions = store.list_actions(&id)?;
        Ok(SessionDetail {
            patient: store.get_patient(&session.patient_id).ok(),
            summary: store.get_summary(&id)?,
            highlights: store.get_highlights(&id)?,
            risk_color: risk.as_ref().map(|r| match r.artifact.level {
                Some(l) => l.color().to_owned(),
                None => "grey".to_owned(),
            }),
            risk,
            processing: store.get_processing(&id)?,
            done: actions.iter().any(|a| a.kind == ActionKind::MarkDone),
            actions,
            session,
        })
    })
    .await?;
    Ok(Json(detail))
}

#[derive(Debug, Deserialize)]
pub struct NewAction {
    pub kind: ActionKind,
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub author: Option<String>,
}

pub async fn append_action(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<SessionId>,
    ApiJson(body): ApiJson<NewAction>,
) -> Result<(StatusCode, Json<ProviderAction>), ApiError> {
    principal.require_provider()?;
    let store = state.store.clone();
    let now = state.clock.now();
    let action = blocking(move || {
        let action = ProviderAction {
            action_id: ActionId::new(InfoStore::new_id("action")),
            session_id: id,
            author: body.author.unwrap_or_else(|| "provider".into()),
            kind: body.kind,
            body: body.body,
            timestamp: now,
        };
        store.append_action(&action)?;
        Ok(action)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(action)))
}

#[derive(Debug, Default, Deserialize)]
pub struct MarkDone {
    #[serde(default)]
    pub author: Option<String>,
    #[serde(default)]
    pub body: String,
}

pub async fn mark_done(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<SessionId>,
    body: Bytes,
) -> Result<(StatusCode, Json<ProviderAction>), ApiError> {
    principal.require_provider()?;
    let body = optional_json::<MarkDone>(&body)?;
    let store = state.store.clone();
    let now = state.clock.now();
    let action = blocking(move || {
        Ok(store.mark_done(&id, body.author.as_deref().unwrap_or("provider"), &body.body, now)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(action)))
}

#[derive(Debug, Default, Deserialize)]
pub struct ProcessQuery {
    #[serde(default)]
    pub force: bool,
}

pub async fn process(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<SessionId>,
    ApiQuery(q): ApiQuery<ProcessQuery>,
) -> Result<Json<ProcessingReport>, ApiError> {
    principal.require_provider()?;
    let pipeline = state.pipeline.clone();
    Ok(Json(blocking(move || Ok(pipeline.process_session(&id, q.force)?)).await?))
}

pub async fn list_protocols(
    State(state): State<AppState>,
    _principal: Principal,
) -> Result<Json<Vec<ConversationProtocol>>, ApiError> {
    let store = state.store.clone();
    Ok(Json(blocking(move || Ok(store.list_protocols()?)).await?))
}

pub async fn get_protocol(
    State(state): State<AppState>,
    _principal: Principal,
    Path(id): Path<ProtocolId>,
) -> Result<Json<ConversationProtocol>, ApiError> {
    let store = state.store.clone();
    Ok(Json(blocking(move || Ok(store.get_protocol(&id)?)).await?))
}

pub async fn put_protocol(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<ProtocolId>,
    ApiJson(protocol): ApiJson<ConversationProtocol>,
) -> Result<Json<ConversationProtocol>, ApiError> {
    principal.require_provider()?;
    if protocol.protocol_id != id {
        return Err(ApiError::validation("protocol_id does not match the path"));
    }
    let store = state.store.clone();
    blocking(move || {
        store.put_protocol(&protocol)?;
        Ok(Json(protocol))
    })
    .await
}

pub async fn list_patients(
    State(state): State<AppState>,
    principal: Principal,
) -> Result<Json<Vec<PatientProfile>>, ApiError> {
    principal.require_provider()?;
    let store = state.store.clone();
    Ok(Json(blocking(move || Ok(store.list_patients()?)).await?))
}

pub async fn get_patient(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<PatientId>,
) -> Result<Json<PatientProfile>, ApiError> {
    principal.require_access(&id)?;
    let store = state.store.clone();
    Ok(Json(blocking(move || Ok(store.get_patient(&id)?)).await?))
}

pub async fn put_patient(
    State(state): State<AppState>,
    principal: Principal,
    Path(id): Path<PatientId>,
    ApiJson(patient): ApiJson<PatientProfile>,
) -> Result<Json<PatientProfile>, ApiError> {
    principal.require_provider()?;
    if patient.patient_id != id {
        return Err(ApiError::validation("patient_id does not match the path"));
    }
    let store = state.store.clone();
    blocking(move || {
        store.put_patient(&patient)?;
        Ok(Json(patient))
    })
    .await
}

pub async fn notifications(
    State(state): State<AppState>,
    principal: Principal,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    principal.require_provider()?;
    let stream = BroadcastStream::new(state.events.subscribe()).filter_map(|msg| {
        let n = msg.ok()?;
        Event::default().event("session_processed").json_data(&n).ok().map(Ok)
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

pub async fn openapi() -> impl IntoResponse {
    Json(crate::openapi::document())
}
