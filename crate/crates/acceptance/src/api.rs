//! Endpoint contract, exercised in-process against the real router: role
//! separation, idempotent retries and lifecycle conflicts.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use carelink_core::domain::{timestamp_from_millis, SessionId};
use carelink_core::{fixtures, InfoStore, ManualClock, PromptEngine, ScriptedBackend};
use carelink_server::{router, AppState, AuthConfig, StateOptions};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use crate::Verdict;

const PROVIDER: &str = "acc-provider";
const JOHN: &str = "acc-john";
const MARY: &str = "acc-mary";

struct Api {
    app: Router,
    store: Arc<InfoStore>,
    calls: usize,
}

struct Reply {
    status: StatusCode,
    replayed: bool,
    body: Value,
}

impl Api {
    fn new() -> Result<Self, String> {
        let store = Arc::new(InfoStore::in_memory());
        for p in fixtures::patients() {
            store.put_patient(&p).map_err(|e| e.to_string())?;
        }
        for p in fixtures::protocols() {
            store.put_protocol(&p).map_err(|e| e.to_string())?;
        }
        let auth = AuthConfig::new()
            .with_provider_token(PROVIDER)
            .with_patient_token(JOHN, "patient-john")
            .with_patient_token(MARY, "patient-mary");
        let state = AppState::new(
            store.clone(),
            Arc::new(PromptEngine::default()),
            Arc::new(ScriptedBackend::from_json(fixtures::POST_SURGERY_SCRIPT_JSON).map_err(|e| e.to_string())?),
            Arc::new(ManualClock::new(timestamp_from_millis(1_709_546_400_000))),
            auth,
            StateOptions { auto_process: false, ..Default::default() },
        )
        .map_err(|e| e.to_string())?;
        Ok(Self { app: router(state), store, calls: 0 })
    }

    async fn send(&mut self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>, key: Option<&str>) -> Reply {
        self.calls += 1;
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        if let Some(k) = key {
            req = req.header("idempotency-key", k);
        }
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .expect("request");
        let resp = self.app.clone().oneshot(req).await.expect("infallible");
        let status = resp.status();
        let replayed = resp.headers().get("idempotent-replayed").is_some();
        let bytes = resp.into_body().collect().await.map(|b| b.to_bytes()).unwrap_or_default();
        Reply { status, replayed, body: serde_json::from_slice(&bytes).unwrap_or(Value::Null) }
    }

    async fn start(&mut self, token: &str, patient: &str, protocol: &str) -> Result<String, String> {
        let r = self
            .send(Method::POST, "/v1/sessions", Some(token), Some(json!({"patient_id": patient, "protocol_id": protocol})), None)
            .await;
        ensure!(r.status == StatusCode::CREATED, "start session: {} {}", r.status, r.body);
        r.body["session_id"].as_str().map(str::to_owned).ok_or_else(|| "no session_id".to_owned())
    }
}

const FIRST: &str = "I'm feeling good overall, thanks for asking. But I have a little pain.";

async fn auth_separation(api: &mut Api) -> Result<usize, String> {
    let john = api.start(PROVIDER, "patient-john", "post-surgery").await?;
    let mary = api.start(MARY, "patient-mary", "daily-care").await?;
    let mut checks = 0;
    let expect = [
        (Method::GET, format!("/v1/sessions/{john}"), Some(MARY), StatusCode::FORBIDDEN),
        (Method::GET, format!("/v1/sessions/{mary}"), Some(JOHN), StatusCode::FORBIDDEN),
        (Method::POST, format!("/v1/sessions/{john}/close"), Some(MARY), StatusCode::FORBIDDEN),
        (Method::POST, format!("/v1/sessions/{john}/pause"), Some(MARY), StatusCode::FORBIDDEN),
        (Method::GET, format!("/v1/sessions/{john}"), Some(JOHN), StatusCode::OK),
        (Method::GET, format!("/v1/sessions/{mary}"), Some(MARY), StatusCode::OK),
        (Method::GET, format!("/v1/sessions/{john}"), Some(PROVIDER), StatusCode::OK),
        (Method::GET, format!("/v1/sessions/{john}"), None, StatusCode::UNAUTHORIZED),
        (Method::GET, format!("/v1/sessions/{john}"), Some("forged"), StatusCode::UNAUTHORIZED),
        (Method::GET, "/v1/provider/sessions".to_owned(), Some(JOHN), StatusCode::FORBIDDEN),
        (Method::GET, format!("/v1/provider/sessions/{john}"), Some(JOHN), StatusCode::FORBIDDEN),
        (Method::POST, format!("/v1/provider/sessions/{john}/done"), Some(JOHN), StatusCode::FORBIDDEN),
        (Method::GET, "/v1/patients/patient-john".to_owned(), Some(MARY), StatusCode::FORBIDDEN),
        (Method::GET, "/v1/provider/sessions".to_owned(), Some(PROVIDER), StatusCode::OK),
    ];
    for (method, uri, token, want) in expect {
        let r = api.send(method.clone(), &uri, token, None, None).await;
        ensure!(r.status == want, "{method} {uri} as {token:?}: {} (want {want})", r.status);
        checks += 1;
    }
    let r = api.send(Method::POST, &format!("/v1/sessions/{john}/turns"), Some(MARY), Some(json!({"text": "hi"})), None).await;
    ensure!(r.status == StatusCode::FORBIDDEN, "cross-patient turn: {}", r.status);
    let r = api
        .send(Method::POST, "/v1/sessions", Some(MARY), Some(json!({"patient_id": "patient-john", "protocol_id": "post-surgery"})), None)
        .await;
    ensure!(r.status == StatusCode::FORBIDDEN, "starting a session for someone else: {}", r.status);
    let listed = api.send(Method::GET, "/v1/provider/sessions", Some(PROVIDER), None, None).await;
    ensure!(listed.body["total"] == 2, "provider sees {} sessions", listed.body["total"]);
    Ok(checks + 3)
}

async fn idempotent_retries(api: &mut Api) -> Result<usize, String> {
    let id = api.start(PROVIDER, "patient-john", "post-surgery").await?;
    let uri = format!("/v1/sessions/{id}/turns");
    let body = json!({ "text": FIRST });
    let first = api.send(Method::POST, &uri, Some(JOHN), Some(body.clone()), Some("retry-1")).await;
    ensure!(first.status == StatusCode::OK, "first attempt: {} {}", first.status, first.body);
    for _ in 0..3 {
        let again = api.send(Method::POST, &uri, Some(JOHN), Some(body.clone()), Some("retry-1")).await;
        ensure!(again.status == first.status && again.body == first.body, "retry answered differently");
        ensure!(again.replayed, "retry was not marked as a replay");
    }
    let stored = api.store.get_session(&SessionId::new(id.as_str())).map_err(|e| e.to_string())?;
    ensure!(stored.turns.len() == 3, "retries executed again: {} turns", stored.turns.len());
    let reuse = api.send(Method::POST, &uri, Some(JOHN), Some(json!({"text": "other"})), Some("retry-1")).await;
    ensure!(reuse.status == StatusCode::UNPROCESSABLE_ENTITY, "key reused with a new body: {}", reuse.status);

    // Starting a session is idempotent too.
    let start = json!({"patient_id": "patient-mary", "protocol_id": "daily-care"});
    let a = api.send(Method::POST, "/v1/sessions", Some(MARY), Some(start.clone()), Some("start-1")).await;
    let b = api.send(Method::POST, "/v1/sessions", Some(MARY), Some(start), Some("start-1")).await;
    ensure!(a.body["session_id"] == b.body["session_id"], "retried start created a second session");

    // A model failure is not cached; the retry runs again.
    let failing = json!({ "text": "unscripted utterance" });
    let f1 = api.send(Method::POST, &uri, Some(JOHN), Some(failing.clone()), Some("retry-2")).await;
    let f2 = api.send(Method::POST, &uri, Some(JOHN), Some(failing), Some("retry-2")).await;
    ensure!(f1.status == StatusCode::BAD_GATEWAY && f2.status == StatusCode::BAD_GATEWAY, "gateway failure: {}", f1.status);
    ensure!(!f2.replayed, "a 502 was replayed from cache");
    Ok(6)
}

async fn lifecycle_conflicts(api: &mut Api) -> Result<usize, String> {
    let id = api.start(PROVIDER, "patient-john", "post-surgery").await?;
    let process = api.send(Method::POST, &format!("/v1/provider/sessions/{id}/process"), Some(PROVIDER), None, None).await;
    ensure!(process.status == StatusCode::CONFLICT, "processing an open session: {}", process.status);
    let close = api.send(Method::POST, &format!("/v1/sessions/{id}/close"), Some(JOHN), None, None).await;
    ensure!(close.status == StatusCode::OK, "close: {}", close.status);
    let again = api.send(Method::POST, &format!("/v1/sessions/{id}/close"), Some(JOHN), None, None).await;
    ensure!(again.status == StatusCode::CONFLICT, "second close: {}", again.status);
    let turn = api.send(Method::POST, &format!("/v1/sessions/{id}/turns"), Some(JOHN), Some(json!({"text": FIRST})), None).await;
    ensure!(turn.status == StatusCode::CONFLICT, "turn after close: {}", turn.status);
    ensure!(turn.body["error"]["code"] == "lifecycle_conflict", "error code {}", turn.body["error"]["code"]);
    let pause = api.send(Method::POST, &format!("/v1/sessions/{id}/pause"), Some(JOHN), None, None).await;
    ensure!(pause.status == StatusCode::CONFLICT, "pause after close: {}", pause.status);

    let done = format!("/v1/provider/sessions/{id}/done");
    let d1 = api.send(Method::POST, &done, Some(PROVIDER), None, None).await;
    ensure!(d1.status == StatusCode::CREATED, "mark done: {}", d1.status);
    let d2 = api.send(Method::POST, &done, Some(PROVIDER), None, None).await;
    ensure!(d2.status == StatusCode::CONFLICT, "second mark done: {}", d2.status);
    let queue = api.send(Method::GET, "/v1/provider/sessions?done=false&status=completed", Some(PROVIDER), None, None).await;
    let still = queue.body["items"].as_array().is_some_and(|items| items.iter().any(|i| i["session_id"] == id.as_str()));
    ensure!(!still, "done session still in the open queue");

    let missing = api.send(Method::GET, "/v1/sessions/does-not-exist", Some(PROVIDER), None, None).await;
    ensure!(missing.status == StatusCode::NOT_FOUND, "unknown session: {}", missing.status);
    Ok(8)
}

pub fn check() -> Verdict {
    let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(|e| e.to_string())?;
    runtime.block_on(async {
        let mut api = Api::new()?;
        let a = auth_separation(&mut api).await?;
        let i = idempotent_retries(&mut api).await?;
        let l = lifecycle_conflicts(&mut api).await?;
        Ok(format!("{} requests; {a} auth, {i} idempotency, {l} lifecycle checks", api.calls))
    })
}
