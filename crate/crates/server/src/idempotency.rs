//! Replay cache for mutating requests that carry an `Idempotency-Key`.
//!
//! The first completed response for a (token, method, path, key) is stored
//! and replayed for later retries. A retry with a different body is
//! rejected. Server errors are not cached, so a retry after a model outage
//! runs again. Requests with the same key are serialized so concurrent
//! retries cannot both execute.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Request, State};
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use parking_lot::Mutex;
use sha2::{Digest, Sha256};

use crate::auth::bearer;
use crate::error::ApiError;
use crate::AppState;

pub const HEADER: &str = "idempotency-key";
pub const REPLAYED_HEADER: &str = "idempotent-replayed";
const MAX_BODY: usize = 1 << 20;

#[derive(Clone)]
struct Cached {
    request_digest: [u8; 32],
    status: StatusCode,
    headers: HeaderMap,
    body: Bytes,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<String, Cached>,
    order: VecDeque<String>,
    in_flight: HashMap<String, Arc<tokio::sync::Mutex<()>>>,
}

pub struct IdempotencyCache {
    capacity: usize,
    inner: Mutex<Inner>,
}

impl IdempotencyCache {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), inner: Mutex::new(Inner::default()) }
    }

    fn slot(&self, key: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.inner.lock().in_flight.entry(key.to_owned()).or_default().clone()
    }

    fn get(&self, key: &str) -> Option<Cached> {
        self.inner.lock().entries.get(key).cloned()
    }

    fn put(&self, key: String, value: Cached) {
        let mut inner = self.inner.lock();
        if inner.entries.insert(key.clone(), value).is_none() {
            inner.order.push_back(key);
        }
        while inner.order.len() > self.capacity {
            if let Some(old) = inner.order.pop_front() {
                inner.entries.remove(&old);
                inner.in_flight.remove(&old);
            }
        }
    }
}

impl Default for IdempotencyCache {
    fn default() -> Self {
        Self::new(10_000)
    }
}

fn replay(c: &Cached) -> Response {
    let mut resp = Response::new(Body::from(c.body.clone()));
    *resp.status_mut() = c.status;
    *resp.headers_mut() = c.headers.clone();
    resp.headers_mut().insert(REPLAYED_HEADER, HeaderValue::from_static("true"));
    resp
}

pub async fn middleware(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if !matches!(*req.method(), Method::POST | Method::PUT | Method::PATCH | Method::DELETE) {
        return next.run(req).await;
    }
    let Some(key) = req.headers().get(HEADER).and_then(|v| v.to_str().ok()).map(str::to_owned) else {
        return next.run(req).await;
    };
    if key.is_empty() || key.len() > 255 {
        return ApiError::validation("Idempotency-Key must be 1-255 characters").into_response();
    }
    let token = bearer(req.headers()).unwrap_or_default();
    let scope = format!(
        "{}|{}|{}|{}",
        hex_digest(token.as_bytes()),
        req.method(),
        req.uri().path(),
        key
    );

    let (parts, body) = req.into_parts();
    let body = match to_bytes(body, MAX_BODY).await {
        Ok(b) => b,
        Err(_) => return ApiError::validation("request body too large").into_response(),
    };
    let digest: [u8; 32] = Sha256::new()
        .chain_update(parts.uri.query().unwrap_or_default().as_bytes())
        .chain_update([0])
        .chain_update(&body)
        .finalize()
        .into();

    let slot = state.idempotency.slot(&scope);
    let _guard = slot.lock().await;
    if let Some(cached) = state.idempotency.get(&scope) {
        if cached.request_digest != digest {
            return ApiError::validation("Idempotency-Key was already used with a different request").into_response();
        }
        return replay(&cached);
    }

    let resp = next.run(Request::from_parts(parts, Body::from(body))).await;
    if resp.status().is_server_error() {
        return resp;
    }
    let (parts, body) = resp.into_parts();
    let bytes = match to_bytes(body, usize::MAX).await {
        Ok(b) => b,
        Err(e) => return ApiError::internal(format!("buffering response: {e}")).into_response(),
    };
    state.idempotency.put(
        scope,
        Cached { request_digest: digest, status: parts.status, headers: parts.headers.clone(), body: bytes.clone() },
    );
    Response::from_parts(parts, Body::from(bytes))
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
