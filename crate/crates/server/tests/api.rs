use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use carelink_core::domain::{timestamp_from_millis, RiskAssessment, RiskLevel, SessionId};
use carelink_core::{fixtures, InfoStore, ManualClock, PromptEngine, ScriptedBackend};
use carelink_server::{router, AppState, AuthConfig, StateOptions};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const PROVIDER: &str = "provider-token";
const JOHN: &str = "john-token";
const MARY: &str = "mary-token";

struct Harness {
    app: Router,
    store: Arc<InfoStore>,
}

fn harness(script: &str) -> Harness {
    let store = Arc::new(InfoStore::in_memory());
    for p in fixtures::patients() {
        store.put_patient(&p).unwrap();
    }
    for p in fixtures::protocols() {
        store.put_protocol(&p).unwrap();
    }
    let auth = AuthConfig::new()
        .with_provider_token(PROVIDER)
        .with_patient_token(JOHN, "patient-john")
        .with_patient_token(MARY, "patient-mary");
    let state = AppState::new(
        store.clone(),
        Arc::new(PromptEngine::default()),
        Arc::new(ScriptedBackend::from_json(script).unwrap()),
        Arc::new(ManualClock::new(timestamp_from_millis(1_709_600_000_000))),
        auth,
        StateOptions { auto_process: false, ..Default::default() },
    )
    .unwrap();
    Harness { app: router(state), store }
}

async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    token: Option<&str>,
    body: Option<Value>,
    idempotency_key: Option<&str>,
) -> (StatusCode, HeaderMap, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    if let Some(k) = idempotency_key {
        req = req.header("idempotency-key", k);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, headers, value)
}

async fn start_john(h: &Harness) -> String {
    let (status, _, body) = call(
        &h.app,
        Method::POST,
        "/v1/sessions",
        Some(PROVIDER),
        Some(json!({ "patient_id": "patient-john", "protocol_id": "post-surgery" })),
        None,
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_owned()
}

const FIRST: &str = "I'm feeling good overall, thanks for asking. But I have a little pain.";

#[tokio::test]
async fn tokens_are_required() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let (s, _, body) = call(&h.app, Method::GET, "/v1/provider/sessions", None, None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(body["error"]["code"], "unauthorized");
    let (s, _, _) = call(&h.app, Method::GET, "/v1/provider/sessions", Some("bogus"), None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _, _) = call(&h.app, Method::GET, "/v1/health", None, None, None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn conversation_turn_returns_scripted_follow_up() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let id = start_john(&h).await;
    let (s, _, body) = call(
        &h.app,
        Method::POST,
        &format!("/v1/sessions/{id}/turns"),
        Some(JOHN),
        Some(json!({ "text": FIRST })),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(
        body["reply"]["text"],
        "I'm glad to hear that you're feeling good overall. I'm sorry to hear about the pain. On a scale of 1 to 10, how would you rate your pain?"
    );
    assert_eq!(body["session"]["turns"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn patients_are_confined_to_their_own_records() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let id = start_john(&h).await;
    let uri = format!("/v1/sessions/{id}");
    assert_eq!(call(&h.app, Method::GET, &uri, Some(JOHN), None, None).await.0, StatusCode::OK);
    assert_eq!(call(&h.app, Method::GET, &uri, Some(MARY), None, None).await.0, StatusCode::FORBIDDEN);
    let turn = call(&h.app, Method::POST, &format!("{uri}/turns"), Some(MARY), Some(json!({ "text": "hi" })), None).await;
    assert_eq!(turn.0, StatusCode::FORBIDDEN);
    for path in ["/v1/provider/sessions", "/v1/patients", "/v1/provider/notifications"] {
        assert_eq!(call(&h.app, Method::GET, path, Some(JOHN), None, None).await.0, StatusCode::FORBIDDEN, "{path}");
    }
    assert_eq!(call(&h.app, Method::GET, "/v1/patients/patient-john", Some(JOHN), None, None).await.0, StatusCode::OK);
    assert_eq!(
        call(&h.app, Method::GET, "/v1/patients/patient-mary", Some(JOHN), None, None).await.0,
        StatusCode::FORBIDDEN
    );
    let start_other = call(
        &h.app,
        Method::POST,
        "/v1/sessions",
        Some(MARY),
        Some(json!({ "patient_id": "patient-john", "protocol_id": "post-surgery" })),
        None,
    )
    .await;
    assert_eq!(start_other.0, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn retried_turn_with_same_key_runs_once() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let id = start_john(&h).await;
    let uri = format!("/v1/sessions/{id}/turns");
    let body = json!({ "text": FIRST });
    let first = call(&h.app, Method::POST, &uri, Some(JOHN), Some(body.clone()), Some("k1")).await;
    let second = call(&h.app, Method::POST, &uri, Some(JOHN), Some(body), Some("k1")).await;
    assert_eq!(first.0, StatusCode::OK);
    assert_eq!(second.0, StatusCode::OK);
    assert_eq!(first.2, second.2);
    assert_eq!(second.1.get("idempotent-replayed").unwrap(), "true");
    let stored = h.store.get_session(&SessionId::new(id.as_str())).unwrap();
    assert_eq!(stored.turns.len(), 3);

    let reused = call(&h.app, Method::POST, &uri, Some(JOHN), Some(json!({ "text": "different" })), Some("k1")).await;
    assert_eq!(reused.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn lifecycle_conflicts_are_409() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let id = start_john(&h).await;
    let (s, _, body) = call(&h.app, Method::POST, &format!("/v1/sessions/{id}/close"), Some(JOHN), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["status"], "completed");
    let turn = call(&h.app, Method::POST, &format!("/v1/sessions/{id}/turns"), Some(JOHN), Some(json!({ "text": "hi" })), None).await;
    assert_eq!(turn.0, StatusCode::CONFLICT);
    assert_eq!(turn.2["error"]["code"], "lifecycle_conflict");
    let again = call(&h.app, Method::POST, &format!("/v1/sessions/{id}/close"), Some(JOHN), None, None).await;
    assert_eq!(again.0, StatusCode::CONFLICT);

    let done = format!("/v1/provider/sessions/{id}/done");
    assert_eq!(call(&h.app, Method::POST, &done, Some(PROVIDER), None, None).await.0, StatusCode::CREATED);
    assert_eq!(call(&h.app, Method::POST, &done, Some(PROVIDER), None, None).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn unknown_ids_and_bad_bodies() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    assert_eq!(call(&h.app, Method::GET, "/v1/sessions/nope", Some(PROVIDER), None, None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        call(&h.app, Method::GET, "/v1/provider/sessions/nope", Some(PROVIDER), None, None).await.0,
        StatusCode::NOT_FOUND
    );
    let missing = call(
        &h.app,
        Method::POST,
        "/v1/sessions",
        Some(PROVIDER),
        Some(json!({ "patient_id": "ghost", "protocol_id": "post-surgery" })),
        None,
    )
    .await;
    assert_eq!(missing.0, StatusCode::NOT_FOUND);
    let id = start_john(&h).await;
    let empty = call(&h.app, Method::POST, &format!("/v1/sessions/{id}/turns"), Some(JOHN), Some(json!({ "text": "  " })), None).await;
    assert_eq!(empty.0, StatusCode::UNPROCESSABLE_ENTITY);
    let wrong = call(&h.app, Method::POST, &format!("/v1/sessions/{id}/turns"), Some(JOHN), Some(json!({ "txt": 1 })), None).await;
    assert_eq!(wrong.0, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_query = call(&h.app, Method::GET, "/v1/provider/sessions?risk=purple", Some(PROVIDER), None, None).await;
    assert_eq!(bad_query.0, StatusCode::UNPROCESSABLE_ENTITY);
    let mismatch = call(
        &h.app,
        Method::PUT,
        "/v1/protocols/other",
        Some(PROVIDER),
        Some(serde_json::to_value(fixtures::post_surgery_protocol()).unwrap()),
        None,
    )
    .await;
    assert_eq!(mismatch.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn model_failure_is_502_and_not_cached() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let id = start_john(&h).await;
    let uri = format!("/v1/sessions/{id}/turns");
    let body = Some(json!({ "text": "something the script never heard" }));
    let (s, _, err) = call(&h.app, Method::POST, &uri, Some(JOHN), body.clone(), Some("k")).await;
    assert_eq!(s, StatusCode::BAD_GATEWAY);
    assert_eq!(err["error"]["code"], "model_unavailable");
    let stored = h.store.get_session(&SessionId::new(id.as_str())).unwrap();
    assert_eq!(stored.turns.len(), 1);
    let (s, headers, _) = call(&h.app, Method::POST, &uri, Some(JOHN), body, Some("k")).await;
    assert_eq!(s, StatusCode::BAD_GATEWAY);
    assert!(headers.get("idempotent-replayed").is_none());
}

#[tokio::test]
async fn risk_filter_and_detail() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let mut high = fixtures::daily_care_session();
    high.session_id = SessionId::new("high-one");
    for s in [fixtures::post_surgery_session(), fixtures::daily_care_session(), high.clone()] {
        h.store.insert_session(&s).unwrap();
    }
    let at = timestamp_from_millis(0);
    for (id, level) in [
        (fixtures::POST_SURGERY_SESSION_ID, RiskLevel::Low),
        (fixtures::DAILY_CARE_SESSION_ID, RiskLevel::Moderate),
        ("high-one", RiskLevel::High),
    ] {
        h.store
            .put_risk(
                RiskAssessment {
                    session_id: SessionId::new(id),
                    level: Some(level),
                    reasoning: String::new(),
                    needs_human_review: false,
                    raw_model_output: String::new(),
                },
                at,
            )
            .unwrap();
    }
    let (s, _, page) = call(&h.app, Method::GET, "/v1/provider/sessions?risk=high", Some(PROVIDER), None, None).await;
    assert_eq!(s, StatusCode::OK);
    let items = page["items"].as_array().unwrap();
    assert_eq!(items.len(), 1);
    assert!(items.iter().all(|i| i["risk_level"] == "high" && i["risk_color"] == "red"));

    let (_, _, all) = call(&h.app, Method::GET, "/v1/provider/sessions", Some(PROVIDER), None, None).await;
    let colors: Vec<_> = all["items"].as_array().unwrap().iter().map(|i| i["risk_color"].as_str().unwrap()).collect();
    assert_eq!(colors, ["red", "yellow", "green"]);
}

#[tokio::test]
async fn process_then_read_detail_and_act() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    h.store.insert_session(&fixtures::post_surgery_session()).unwrap();
    let id = fixtures::POST_SURGERY_SESSION_ID;
    let (s, _, report) = call(
        &h.app,
        Method::POST,
        &format!("/v1/provider/sessions/{id}/process"),
        Some(PROVIDER),
        None,
        None,
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{report}");
    assert_eq!(report["notified"], true);

    let (s, _, detail) = call(&h.app, Method::GET, &format!("/v1/provider/sessions/{id}"), Some(PROVIDER), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(detail["risk"]["artifact"]["level"], "low");
    assert_eq!(detail["risk_color"], "green");
    assert!(detail["summary"]["artifact"]["raw_model_output"].as_str().unwrap().contains("Pain level: 2"));
    assert_eq!(detail["session"]["turns"].as_array().unwrap().len(), 15);
    assert!(detail["highlights"]["artifact"]["spans"]
        .as_array()
        .unwrap()
        .iter()
        .any(|sp| sp["quote"] == "I have a little pain" && sp["turn_index"] == 1));

    let (s, _, action) = call(
        &h.app,
        Method::POST,
        &format!("/v1/provider/sessions/{id}/actions"),
        Some(PROVIDER),
        Some(json!({ "kind": "note", "body": "Call back about painkillers" })),
        None,
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(action["kind"], "note");
    let (_, _, detail) = call(&h.app, Method::GET, &format!("/v1/provider/sessions/{id}"), Some(PROVIDER), None, None).await;
    assert_eq!(detail["actions"].as_array().unwrap().len(), 1);
    assert_eq!(detail["done"], false);

    let open = call(&h.app, Method::GET, "/v1/provider/sessions?done=false", Some(PROVIDER), None, None).await;
    assert_eq!(open.2["total"], 1);
    call(&h.app, Method::POST, &format!("/v1/provider/sessions/{id}/done"), Some(PROVIDER), None, None).await;
    let open = call(&h.app, Method::GET, "/v1/provider/sessions?done=false", Some(PROVIDER), None, None).await;
    assert_eq!(open.2["total"], 0);
}

#[tokio::test]
async fn processing_an_open_session_conflicts() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let id = start_john(&h).await;
    let (s, _, _) = call(&h.app, Method::POST, &format!("/v1/provider/sessions/{id}/process"), Some(PROVIDER), None, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn notification_stream_and_openapi() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let req = Request::builder()
        .uri("/v1/provider/notifications")
        .header("authorization", format!("Bearer {PROVIDER}"))
        .body(Body::empty())
        .unwrap();
    let resp = h.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");

    let (s, _, doc) = call(&h.app, Method::GET, "/v1/openapi", None, None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(doc["paths"]["/provider/sessions/{id}/done"].is_object());
}

#[tokio::test]
async fn provider_manages_patients_and_protocols() {
    let h = harness(fixtures::POST_SURGERY_SCRIPT_JSON);
    let mut p = fixtures::mary();
    p.name = "Mary Ann".into();
    let (s, _, _) = call(&h.app, Method::PUT, "/v1/patients/patient-mary", Some(PROVIDER), Some(serde_json::to_value(&p).unwrap()), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, _, got) = call(&h.app, Method::GET, "/v1/patients/patient-mary", Some(MARY), None, None).await;
    assert_eq!(got["name"], "Mary Ann");
    let (s, _, _) = call(&h.app, Method::PUT, "/v1/patients/patient-mary", Some(MARY), Some(serde_json::to_value(&p).unwrap()), None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    p.age = 0;
    let (s, _, _) = call(&h.app, Method::PUT, "/v1/patients/patient-mary", Some(PROVIDER), Some(serde_json::to_value(&p).unwrap()), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _, list) = call(&h.app, Method::GET, "/v1/protocols", Some(MARY), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 2);
}
