use serde_json::{json, Value};

fn op(summary: &str, role: &str, ok: u16) -> Value {
    json!({
        "summary": summary,
        "security": [{ "bearer": [] }],
        "x-role": role,
        "responses": { ok.to_string(): { "description": "success" }, "default": { "$ref": "#/components/responses/Error" } }
    })
}

fn mutating(summary: &str, role: &str, ok: u16) -> Value {
    let mut v = op(summary, role, ok);
    v["parameters"] = json!([{ "$ref": "#/components/parameters/IdempotencyKey" }]);
    v
}

pub fn document() -> Value {
    json!({
        "openapi": "3.0.3",
        "info": { "title": "carelink", "version": "1" },
        "servers": [{ "url": "/v1" }],
        "paths": {
            "/health": { "get": { "summary": "Liveness", "responses": { "200": { "description": "ok" } } } },
            "/sessions": { "post": mutating("Start a session", "patient|provider", 201) },
            "/sessions/{id}": { "get": op("Read a session", "patient(own)|provider", 200) },
            "/sessions/{id}/turns": { "post": mutating("Send a patient utterance and receive the assistant reply", "patient(own)|provider", 200) },
            "/sessions/{id}/pause": { "post": mutating("Report a silence timeout", "patient(own)|provider", 200) },
            "/sessions/{id}/close": { "post": mutating("Close or abort a session", "patient(own)|provider", 200) },
            "/provider/sessions": { "get": op("Triage queue: filter by patient_id, status, risk, done; page with offset, limit", "provider", 200) },
            "/provider/sessions/{id}": { "get": op("Session detail: log, summary, highlights, risk, actions", "provider", 200) },
            "/provider/sessions/{id}/actions": { "post": mutating("Append a note or follow-up action", "provider", 201) },
            "/provider/sessions/{id}/done": { "post": mutating("Mark a session done (once)", "provider", 201) },
            "/provider/sessions/{id}/process": { "post": mutating("Run summary, highlight and risk stages; ?force=true re-runs all", "provider", 200) },
            "/provider/notifications": { "get": op("Server-sent events: session_processed", "provider", 200) },
            "/protocols": { "get": op("List protocols", "patient|provider", 200) },
            "/protocols/{id}": { "get": op("Read a protocol", "patient|provider", 200), "put": mutating("Create or replace a protocol", "provider", 200) },
            "/patients": { "get": op("List patients", "provider", 200) },
            "/patients/{id}": { "get": op("Read a patient", "patient(own)|provider", 200), "put": mutating("Create or replace a patient", "provider", 200) },
            "/openapi": { "get": { "summary": "This document", "responses": { "200": { "description": "ok" } } } }
        },
        "components": {
            "securitySchemes": { "bearer": { "type": "http", "scheme": "bearer" } },
            "parameters": {
                "IdempotencyKey": { "name": "Idempotency-Key", "in": "header", "required": false, "schema": { "type": "string", "maxLength": 255 } }
            },
            "responses": {
                "Error": {
                    "description": "401 unauthorized, 403 forbidden, 404 not found, 409 lifecycle conflict, 422 validation, 502 model unavailable",
                    "content": { "application/json": { "schema": {
                        "type": "object",
                        "properties": { "error": { "type": "object", "properties": { "code": { "type": "string" }, "message": { "type": "string" } } } }
                    } } }
                }
            }
        }
    })
}
