//! HTTP JSON API under `/v1` for the patient client and provider dashboard.

pub mod auth;
pub mod error;
pub mod idempotency;
mod openapi;
pub mod routes;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;
use carelink_core::pipeline::{Analyzer, Notification, NotificationSink, Pipeline};
use carelink_core::{Clock, CompletionBackend, ConversationEngine, EngineConfig, InfoStore, PromptEngine, SessionService};
use tokio::sync::broadcast;

pub use auth::{AuthConfig, Principal};
pub use idempotency::IdempotencyCache;

/// Forwards pipeline notifications to SSE subscribers.
pub struct BroadcastSink(pub broadcast::Sender<Notification>);

impl NotificationSink for BroadcastSink {
    fn notify(&self, notification: &Notification) {
        // No subscribers is fine; the dashboard polls as well.
        let _ = self.0.send(notification.clone());
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<InfoStore>,
    pub sessions: Arc<SessionService>,
    pub pipeline: Arc<Pipeline>,
    pub auth: Arc<AuthConfig>,
    pub events: broadcast::Sender<Notification>,
    pub idempotency: Arc<IdempotencyCache>,
    pub clock: Arc<dyn Clock>,
    /// Process sessions in the background as soon as they complete.
    pub auto_process: bool,
}

pub struct StateOptions {
    pub engine: EngineConfig,
    pub auto_process: bool,
}

impl Default for StateOptions {
    fn default() -> Self {
        Self { engine: EngineConfig::default(), auto_process: true }
    }
}

impl AppState {
    pub fn new(
        store: Arc<InfoStore>,
        prompts: Arc<PromptEngine>,
        backend: Arc<dyn CompletionBackend>,
        clock: Arc<dyn Clock>,
        auth: AuthConfig,
        options: StateOptions,
    ) -> Result<Self, carelink_core::EngineError> {
        let generation = options.engine.generation.clone();
        let engine = ConversationEngine::new(
            prompts.clone(),
            backend.clone(),
            Default::default(),
            options.engine,
            clock.clone(),
        )?;
        let (events, _) = broadcast::channel(256);
        let pipeline = Pipeline::new(
            Analyzer::new(prompts, backend, generation),
            store.clone(),
            clock.clone(),
            Arc::new(BroadcastSink(events.clone())),
        );
        Ok(Self {
            sessions: Arc::new(SessionService::new(store.clone(), Arc::new(engine))),
            pipeline: Arc::new(pipeline),
            store,
            auth: Arc::new(auth),
            events,
            idempotency: Arc::new(IdempotencyCache::default()),
            clock,
            auto_process: options.auto_process,
        })
    }
}

pub fn router(state: AppState) -> Router {
    use routes::*;

    let v1 = Router::new()
        .route("/health", get(health))
        .route("/openapi", get(openapi))
        .route("/sessions", post(start_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/turns", post(patient_turn))
        .route("/sessions/{id}/pause", post(pause))
        .route("/sessions/{id}/close", post(close_session))
        .route("/provider/sessions", get(list_sessions))
        .route("/provider/sessions/{id}", get(session_detail))
        .route("/provider/sessions/{id}/actions", post(append_action))
        .route("/provider/sessions/{id}/done", post(mark_done))
        .route("/provider/sessions/{id}/process", post(process))
        .route("/provider/notifications", get(notifications))
        .route("/protocols", get(list_protocols))
        .route("/protocols/{id}", get(get_protocol).put(put_protocol))
        .route("/patients", get(list_patients))
        .route("/patients/{id}", get(get_patient).put(put_patient))
        .layer(axum::middleware::from_fn_with_state(state.clone(), idempotency::middleware));

    Router::new().nest("/v1", v1).with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// `PORT`, defaulting to 8080.
pub fn port_from_env() -> Result<u16, String> {
    match std::env::var("PORT") {
        Ok(v) => v.parse().map_err(|_| format!("PORT `{v}` is not a valid port")),
        Err(_) => Ok(8080),
    }
}
