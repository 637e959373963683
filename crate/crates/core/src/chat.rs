//! Chat-completions transport shared by the extraction pipeline and the
//! system-under-test harness, plus a fixture-driven mock.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::TransportError;

pub const LLM_API_KEY_ENV: &str = "MORTAR_LLM_API_KEY";
pub const SUT_API_KEY_ENV: &str = "MORTAR_SUT_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// One completion request. `purpose` names the calling pipeline function and
/// is not sent over the wire.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub purpose: String,
    pub messages: Vec<ChatMessage>,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
    fn model_name(&self) -> String;
    fn describe(&self) -> String;
}

/// Counting semaphore capping in-flight requests.
#[derive(Debug)]
struct InFlight {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(cap: usize) -> Self {
        InFlight {
            slots: Mutex::new(cap.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        while *slots == 0 {
            slots = self.freed.wait(slots).unwrap_or_else(|e| e.into_inner());
        }
        *slots -= 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut slots = self.0.slots.lock().unwrap_or_else(|e| e.into_inner());
        *slots += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct ChatClientConfig {
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub api_key: Option<String>,
    pub backoff: Duration,
}

impl ChatClientConfig {
    pub fn new(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        ChatClientConfig {
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            max_retries: 2,
            timeout: Duration::from_secs(60),
            max_in_flight: 8,
            api_key: None,
            backoff: Duration::from_millis(500),
        }
    }

    pub fn api_key_from_env(mut self, var: &str) -> Self {
        self.api_key = std::env::var(var).ok().filter(|k| !k.is_empty());
        self
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

/// Client for `POST {endpoint}/chat/completions`.
pub struct HttpChatClient {
    config: ChatClientConfig,
    http: reqwest::blocking::Client,
    in_flight: InFlight,
}

impl HttpChatClient {
    pub fn new(config: ChatClientConfig) -> Result<Self, TransportError> {
        let http = reqwest::blocking::Client::builder().timeout(config.timeout).build()?;
        let in_flight = InFlight::new(config.max_in_flight);
        Ok(HttpChatClient {
            config,
            http,
            in_flight,
        })
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn send_once(&self, messages: &[ChatMessage]) -> Result<String, TransportError> {
        let _slot = self.in_flight.acquire();
        let mut req = self.http.post(self.url()).json(&WireRequest {
            model: &self.config.model_name,
            messages,
            temperature: self.config.temperature,
        });
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send()?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        let body: WireResponse = resp.json().map_err(|e| TransportError::Malformed(e.to_string()))?;
        body.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::Malformed("no choices[0].message.content".into()))
    }
}

fn retryable(e: &TransportError) -> bool {
    match e {
        TransportError::Status { status, .. } => *status == 429 || *status >= 500,
        TransportError::Http(_) | TransportError::Malformed(_) => true,
        TransportError::NoFixture { .. } => false,
    }
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut delay = self.config.backoff;
        let mut attempt = 0;
        loop {
            match self.send_once(&request.messages) {
                Ok(text) => return Ok(text),
                Err(e) if attempt < self.config.max_retries && retryable(&e) => {
                    log::debug!("{} attempt {} failed: {e}", request.purpose, attempt + 1);
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn model_name(&self) -> String {
        self.config.model_name.clone()
    }

    fn describe(&self) -> String {
        format!("{} ({})", self.config.endpoint, self.config.model_name)
    }
}

/// One canned response. `contains` must occur in the last user message; an
/// entry without it matches every request for its purpose. With several
/// responses, successive matches walk the list and then repeat the last one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEntry {
    pub function: String,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub response: Option<Value>,
    #[serde(default)]
    pub responses: Vec<Value>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default = "default_mock_model")]
    pub model: String,
    pub entries: Vec<MockEntry>,
}

fn default_mock_model() -> String {
    "mock".into()
}

/// Deterministic chat backend answering from a fixture table.
#[derive(Debug, Default)]
pub struct MockChatClient {
    fixture: MockFixture,
    hits: Mutex<HashMap<usize, usize>>,
    calls: AtomicUsize,
}

impl MockChatClient {
    pub fn new(fixture: MockFixture) -> Self {
        MockChatClient {
            fixture,
            hits: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, TransportError> {
        let raw = std::fs::read(path).map_err(|e| TransportError::Malformed(format!("{}: {e}", path.display())))?;
        let fixture: MockFixture =
            serde_json::from_slice(&raw).map_err(|e| TransportError::Malformed(format!("{}: {e}", path.display())))?;
        Ok(Self::new(fixture))
    }

    /// Number of requests answered so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ChatBackend for MockChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        // The first user message carries the rendered template; repair turns
        // are appended after it.
        let first_prompt = request
            .messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or(prompt);
        let found = self.fixture.entries.iter().enumerate().find(|(_, e)| {
            e.function == request.purpose
                && e.contains
                    .as_deref()
                    .map_or(true, |needle| first_prompt.contains(needle))
        });
        let (idx, entry) = found.ok_or_else(|| TransportError::NoFixture {
            function: request.purpose.clone(),
        })?;
        let mut hits = self.hits.lock().unwrap_or_else(|e| e.into_inner());
        let n = hits.entry(idx).or_default();
        let value = if entry.responses.is_empty() {
            entry.response.clone().unwrap_or(Value::Null)
        } else {
            entry.responses[(*n).min(entry.responses.len() - 1)].clone()
        };
        *n += 1;
        Ok(render_value(&value))
    }

    fn model_name(&self) -> String {
        self.fixture.model.clone()
    }

    fn describe(&self) -> String {
        format!("mock ({} entries)", self.fixture.entries.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn req(purpose: &str, text: &str) -> ChatRequest {
        ChatRequest {
            purpose: purpose.into(),
            messages: vec![ChatMessage::system("s"), ChatMessage::user(text)],
        }
    }

    #[test]
    fn mock_matches_by_function_and_substring() {
        let mock = MockChatClient::new(MockFixture {
            model: "m".into(),
            entries: vec![
                MockEntry {
                    function: "topic".into(),
                    contains: Some("tea".into()),
                    response: Some(json!({"topic": "Tea history"})),
                    responses: vec![],
                },
                MockEntry {
                    function: "topic".into(),
                    contains: None,
                    response: Some(json!("plain")),
                    responses: vec![],
                },
            ],
        });
        assert_eq!(mock.complete(&req("topic", "about tea")).unwrap(), r#"{"topic":"Tea history"}"#);
        assert_eq!(mock.complete(&req("topic", "other")).unwrap(), "plain");
        assert!(matches!(
            mock.complete(&req("graph", "x")),
            Err(TransportError::NoFixture { .. })
        ));
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn mock_walks_response_sequence() {
        let mock = MockChatClient::new(MockFixture {
            model: "m".into(),
            entries: vec![MockEntry {
                function: "f".into(),
                contains: None,
                response: None,
                responses: vec![json!("one"), json!("two")],
            }],
        });
        let got: Vec<String> = (0..3).map(|_| mock.complete(&req("f", "")).unwrap()).collect();
        assert_eq!(got, vec!["one", "two", "two"]);
    }

    #[test]
    fn wire_request_shape() {
        let msgs = vec![ChatMessage::system("rules"), ChatMessage::user("hi")];
        let v = serde_json::to_value(WireRequest {
            model: "m",
            messages: &msgs,
            temperature: 0.0,
        })
        .unwrap();
        assert_eq!(
            v,
            json!({"model":"m","messages":[{"role":"system","content":"rules"},{"role":"user","content":"hi"}],"temperature":0.0})
        );
    }
}
