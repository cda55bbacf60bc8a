//! Chat-completion and token-logprob clients, plus deterministic mocks.

mod http;
mod scorer;

pub use http::{HttpChatClient, HttpConfig, HttpScorer, RetryPolicy, TokenBucket};
pub use scorer::{token_logprobs, LmScorer, TokenLogprob, UnigramScorer};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_CHAT_ENDPOINT: &str = "SECREQ_CHAT_ENDPOINT";
pub const ENV_CHAT_MODEL: &str = "SECREQ_CHAT_MODEL";
pub const ENV_SCORER_ENDPOINT: &str = "SECREQ_SCORER_ENDPOINT";
pub const ENV_SCORER_MODEL: &str = "SECREQ_SCORER_MODEL";
pub const ENV_API_KEY: &str = "SECREQ_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited {
        attempts: u32,
        retry_after: Option<Duration>,
    },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport {
        attempts: u32,
        retryable: bool,
        message: String,
    },
    #[error("service returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no scripted response for request fingerprint {fingerprint}")]
    ScriptedMiss { fingerprint: String },
    #[error("mock script {path}: {message}")]
    Script { path: String, message: String },
}

impl GatewayError {
    /// Whether repeating the same request could succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::RateLimited { .. } => true,
            GatewayError::Transport { retryable, .. } => *retryable,
            GatewayError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

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
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// Temperature 0 and a fixed seed by default.
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            seed: Some(0),
            max_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("no user message".into()));
        }
        if let Some(i) = self.messages.iter().position(|m| m.content.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("message {i} is empty")));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.messages)
    }
}

/// SHA-256 (hex) of the JSON serialization of the message list.
pub fn fingerprint(messages: &[ChatMessage]) -> String {
    let json = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(json))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Filtered,
    Other,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

impl ChatResponse {
    pub fn stop(content: impl Into<String>) -> Self {
        ChatResponse {
            content: content.into(),
            finish_reason: FinishReason::Stop,
            usage: Usage::default(),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> String;
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    /// True when identical requests always yield identical responses.
    fn deterministic(&self) -> bool {
        false
    }
}

/// Replies with the last user message.
#[derive(Debug, Default, Clone)]
pub struct EchoMock;

impl ChatBackend for EchoMock {
    fn backend_id(&self) -> String {
        "mock:echo".into()
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        Ok(ChatResponse::stop(request.last_user().unwrap_or_default()))
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Canned responses keyed by request fingerprint. Loaded from a JSON object
/// mapping fingerprint to response text.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub responses: BTreeMap<String, String>,
}

impl MockScript {
    pub fn insert(&mut self, messages: &[ChatMessage], response: impl Into<String>) {
        self.responses.insert(fingerprint(messages), response.into());
    }

    pub fn from_json(s: &str) -> Result<Self, GatewayError> {
        serde_json::from_str(s).map_err(|e| GatewayError::Script {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, GatewayError> {
        let err = |message: String| GatewayError::Script {
            path: path.display().to_string(),
            message,
        };
        let s = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&s).map_err(|e| err(e.to_string()))
    }
}

#[derive(Debug, Default)]
pub struct ScriptedMock {
    script: MockScript,
    calls: AtomicUsize,
}

impl ScriptedMock {
    pub fn new(script: MockScript) -> Self {
        ScriptedMock { script, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedMock {
    fn backend_id(&self) -> String {
        "mock:scripted".into()
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fp = request.fingerprint();
        match self.script.responses.get(&fp) {
            Some(r) => Ok(ChatResponse::stop(r.clone())),
            None => Err(GatewayError::ScriptedMiss { fingerprint: fp }),
        }
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Send `requests` through `backend` with at most `max_in_flight` concurrent
/// calls. Results come back in request order. Deterministic backends, or
/// `max_in_flight <= 1`, run serially.
pub fn chat_all(
    backend: &dyn ChatBackend,
    requests: &[ChatRequest],
    max_in_flight: usize,
) -> Vec<Result<ChatResponse, GatewayError>> {
    let workers = if backend.deterministic() { 1 } else { max_in_flight.max(1) };
    bounded_map(requests, workers, |r| backend.chat(r))
}

/// Apply `f` to each item with up to `workers` threads, preserving order.
pub fn bounded_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::system("be terse"), ChatMessage::user(text)])
    }

    #[test]
    fn echo_returns_last_user_message() {
        assert_eq!(EchoMock.chat(&req("ping")).unwrap().content, "ping");
    }

    #[test]
    fn scripted_hit_and_miss() {
        let mut script = MockScript::default();
        script.insert(&req("derive SRs").messages, "The system shall lock accounts.");
        let mock = ScriptedMock::new(script.clone());
        assert_eq!(mock.chat(&req("derive SRs")).unwrap().content, "The system shall lock accounts.");
        match mock.chat(&req("other")) {
            Err(GatewayError::ScriptedMiss { fingerprint }) => {
                assert_eq!(fingerprint, req("other").fingerprint())
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(mock.calls(), 2);
        let json = serde_json::to_string(&script).unwrap();
        assert_eq!(MockScript::from_json(&json).unwrap(), script);
    }

    #[test]
    fn fingerprint_ignores_sampling_parameters() {
        let mut a = req("x");
        a.temperature = 0.7;
        assert_eq!(a.fingerprint(), req("x").fingerprint());
        assert_ne!(req("x").fingerprint(), req("y").fingerprint());
        assert_eq!(req("x").fingerprint().len(), 64);
    }

    #[test]
    fn request_validation() {
        let only_system = ChatRequest::new("m", vec![ChatMessage::system("s")]);
        assert!(matches!(EchoMock.chat(&only_system), Err(GatewayError::InvalidRequest(_))));
        let blank = ChatRequest::new("m", vec![ChatMessage::user("  ")]);
        assert!(blank.validate().is_err());
    }

    #[test]
    fn bounded_map_preserves_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = bounded_map(&items, 4, |x| {
            std::thread::sleep(Duration::from_micros((50 - x) * 20));
            x * 2
        });
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn retryability() {
        assert!(GatewayError::Status { status: 503, body: String::new() }.is_retryable());
        assert!(!GatewayError::Auth { status: 401 }.is_retryable());
        assert!(!GatewayError::Malformed("x".into()).is_retryable());
    }
}
