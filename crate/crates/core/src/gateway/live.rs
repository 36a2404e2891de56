use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde_json::{json, Value};

use super::{CompletionBackend, CompletionRequest, GatewayError};
use crate::prompt::Role;

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    pub api_key: String,
    pub request_timeout: Duration,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    /// Minimum spacing between request starts.
    pub min_request_interval: Duration,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: api_key.into(),
            request_timeout: Duration::from_secs(60),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            min_request_interval: Duration::from_millis(100),
        }
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        let var = |name: &str| {
            std::env::var(name)
                .ok()
                .filter(|v| !v.trim().is_empty())
                .ok_or_else(|| GatewayError::NotConfigured(format!("{name} is not set")))
        };
        Ok(Self::new(var("LLM_BASE_URL")?, var("LLM_MODEL")?, var("LLM_API_KEY")?))
    }
}

/// Chat-completion client. Transient failures are retried with
/// exponential backoff; auth and request errors are not.
pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
    next_slot: Mutex<Instant>,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| GatewayError::NotConfigured(e.to_string()))?;
        Ok(Self { config, client, next_slot: Mutex::new(Instant::now()) })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn wait_for_slot(&self) {
        let wait = {
            let mut next = self.next_slot.lock();
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.config.min_request_interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn attempt(&self, body: &Value) -> Result<String, GatewayError> {
        self.wait_for_slot();
        let response = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    GatewayError::Timeout
                } else {
                    GatewayError::Transport(e.to_string())
                }
            })?;
        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::Auth(format!("HTTP {status}"))),
            408 | 504 => return Err(GatewayError::Timeout),
            429 => return Err(GatewayError::RateLimited),
            500..=599 => return Err(GatewayError::Server(status)),
            _ => return Err(GatewayError::Rejected(status)),
        }
        let payload: Value = response.json().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::MalformedResponse(e.to_string())
            }
        })?;
        payload
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))
    }
}

impl CompletionBackend for LiveBackend {
    fn backend_id(&self) -> &str {
        "live"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        tracing::debug!(purpose = request.context.purpose.as_str(), body = %body, "completion request");

        let attempts = self.config.max_attempts.max(1);
        let mut backoff = self.config.initial_backoff;
        let mut attempt = 1;
        loop {
            match self.attempt(&body) {
                Ok(text) => {
                    tracing::debug!(response = %text, "completion response");
                    return Ok(text);
                }
                Err(err) if err.is_retryable() && attempt < attempts => {
                    tracing::warn!(attempt, error = %err, "transient model backend failure, retrying");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::RequestContext;
    use crate::prompt::Message;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves the canned `(status, body)` pairs in order, one per connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), hits)
    }

    fn backend(url: &str) -> LiveBackend {
        let mut cfg = LiveConfig::new(url, "test-model", "key");
        cfg.initial_backoff = Duration::from_millis(5);
        cfg.min_request_interval = Duration::ZERO;
        LiveBackend::new(cfg).unwrap()
    }

    fn request() -> CompletionRequest {
        CompletionRequest {
            messages: vec![Message::new(Role::User, "hi")],
            temperature: 0.7,
            max_output_tokens: 32,
            backend_id: "live".into(),
            context: RequestContext::default(),
        }
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Hello there"}}]}"#;

    #[test]
    fn parses_choice_content() {
        let (url, _) = serve(vec![(200, OK.into())]);
        assert_eq!(backend(&url).complete(&request()).unwrap(), "Hello there");
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let (url, hits) = serve(vec![(401, "{}".into()), (200, OK.into())]);
        let err = backend(&url).complete(&request()).unwrap_err();
        assert!(matches!(err, GatewayError::Auth(_)));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn transient_failures_retried_up_to_three_times() {
        let (url, hits) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, OK.into())]);
        assert_eq!(backend(&url).complete(&request()).unwrap(), "Hello there");
        assert_eq!(hits.load(Ordering::SeqCst), 3);

        let (url, hits) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into()), (200, OK.into())]);
        assert_eq!(backend(&url).complete(&request()).unwrap_err(), GatewayError::Server(500));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn malformed_payload_reported() {
        let (url, _) = serve(vec![(200, r#"{"choices":[]}"#.into())]);
        assert!(matches!(
            backend(&url).complete(&request()),
            Err(GatewayError::MalformedResponse(_))
        ));
    }

    #[test]
    fn distinct_error_kinds() {
        let (url, _) = serve(vec![(429, "{}".into()); 3]);
        assert_eq!(backend(&url).complete(&request()).unwrap_err(), GatewayError::RateLimited);
        let (url, _) = serve(vec![(504, "{}".into()); 3]);
        assert_eq!(backend(&url).complete(&request()).unwrap_err(), GatewayError::Timeout);
        let (url, _) = serve(vec![(400, "{}".into())]);
        assert_eq!(backend(&url).complete(&request()).unwrap_err(), GatewayError::Rejected(400));
    }
}
