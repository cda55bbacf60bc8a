//! HTTP transport in the common hosted chat-completion shape.
//!
//! Chat request body:
//! `{"model", "messages": [{"role", "content"}], "temperature", "seed"?, "max_tokens"?}`
//! Chat response: `choices[0].message.content`, `choices[0].finish_reason`,
//! `usage.prompt_tokens`, `usage.completion_tokens`.
//!
//! Scoring uses the completions shape with echo:
//! `{"model", "prompt", "max_tokens": 0, "echo": true, "logprobs": 0}` and reads
//! `choices[0].logprobs.tokens` / `choices[0].logprobs.token_logprobs`.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, Response};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    ChatBackend, ChatRequest, ChatResponse, FinishReason, GatewayError, LmScorer, TokenLogprob, Usage,
    ENV_API_KEY, ENV_CHAT_ENDPOINT, ENV_CHAT_MODEL, ENV_SCORER_ENDPOINT, ENV_SCORER_MODEL,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1),
    /// capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub requests_per_second: Option<f64>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: String::new(),
            model: String::new(),
            api_key: None,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            requests_per_second: None,
        }
    }
}

impl HttpConfig {
    fn from_env_vars(endpoint_var: &str, model_var: &str) -> Result<Self, GatewayError> {
        let get = |k: &str| {
            std::env::var(k).map_err(|_| GatewayError::InvalidRequest(format!("environment variable {k} not set")))
        };
        Ok(HttpConfig {
            endpoint: get(endpoint_var)?,
            model: get(model_var)?,
            api_key: std::env::var(ENV_API_KEY).ok(),
            ..Default::default()
        })
    }

    pub fn chat_from_env() -> Result<Self, GatewayError> {
        Self::from_env_vars(ENV_CHAT_ENDPOINT, ENV_CHAT_MODEL)
    }

    pub fn scorer_from_env() -> Result<Self, GatewayError> {
        Self::from_env_vars(ENV_SCORER_ENDPOINT, ENV_SCORER_MODEL)
    }
}

/// Token bucket: `capacity` burst, refilled at `rate` tokens per second.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    rate: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: f64, rate: f64) -> Self {
        TokenBucket {
            capacity,
            rate,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Take one token, returning how long the caller must wait first.
    pub fn reserve(&self) -> Duration {
        let mut st = self.state.lock().expect("bucket");
        let now = Instant::now();
        let refilled = (st.0 + now.duration_since(st.1).as_secs_f64() * self.rate).min(self.capacity);
        st.0 = refilled - 1.0;
        st.1 = now;
        if st.0 >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-st.0 / self.rate)
        }
    }

    pub fn acquire(&self) {
        let wait = self.reserve();
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

struct Semaphore {
    count: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { count: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut c = self.count.lock().expect("semaphore");
        while *c == 0 {
            c = self.cv.wait(c).expect("semaphore");
        }
        *c -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().expect("semaphore") += 1;
        self.0.cv.notify_one();
    }
}

/// Shared request machinery: in-flight bound, rate limit, retries.
struct Transport {
    config: HttpConfig,
    client: Client,
    in_flight: Semaphore,
    bucket: Option<TokenBucket>,
}

impl Transport {
    fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport { attempts: 0, retryable: false, message: e.to_string() })?;
        let bucket = config
            .requests_per_second
            .filter(|r| *r > 0.0)
            .map(|r| TokenBucket::new(config.max_in_flight.max(1) as f64, r));
        Ok(Transport {
            in_flight: Semaphore::new(config.max_in_flight),
            client,
            bucket,
            config,
        })
    }

    fn send_once(&self, body: &Value, attempt: u32) -> Result<Value, GatewayError> {
        let _slot = self.in_flight.acquire();
        if let Some(b) = &self.bucket {
            b.acquire();
        }
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp: Response = req.send().map_err(|e| GatewayError::Transport {
            attempts: attempt,
            retryable: e.is_timeout() || e.is_connect() || e.is_request(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = resp.text().map_err(|e| GatewayError::Transport {
            attempts: attempt,
            retryable: true,
            message: e.to_string(),
        })?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| GatewayError::Malformed(e.to_string())),
            401 | 403 => Err(GatewayError::Auth { status }),
            429 => Err(GatewayError::RateLimited { attempts: attempt, retry_after }),
            _ => Err(GatewayError::Status {
                status,
                body: text.chars().take(500).collect(),
            }),
        }
    }

    fn post(&self, body: &Value) -> Result<Value, GatewayError> {
        let policy = &self.config.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(body, attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < policy.max_attempts.max(1) => {
                    let wait = match &e {
                        GatewayError::RateLimited { retry_after: Some(d), .. } => *d,
                        _ => policy.delay(attempt),
                    };
                    warn!(attempt, error = %e, wait_ms = wait.as_millis() as u64, "retrying request");
                    std::thread::sleep(wait);
                }
                Err(e) => {
                    return Err(match e {
                        GatewayError::Transport { retryable, message, .. } => {
                            GatewayError::Transport { attempts: attempt, retryable, message }
                        }
                        GatewayError::RateLimited { retry_after, .. } => {
                            GatewayError::RateLimited { attempts: attempt, retry_after }
                        }
                        other => other,
                    })
                }
            }
        }
    }
}

pub struct HttpChatClient {
    transport: Transport,
}

impl HttpChatClient {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        Ok(HttpChatClient { transport: Transport::new(config)? })
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        Self::new(HttpConfig::chat_from_env()?)
    }
}

fn parse_chat(v: &Value) -> Result<ChatResponse, GatewayError> {
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::Malformed("missing choices[0]".into()))?;
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some("content_filter") => FinishReason::Filtered,
        Some(_) => FinishReason::Other,
    };
    let content = choice.pointer("/message/content").and_then(Value::as_str);
    let content = match (content, finish_reason) {
        (Some(c), _) => c.to_string(),
        (None, FinishReason::Stop) => {
            return Err(GatewayError::Malformed("missing choices[0].message.content".into()))
        }
        (None, _) => String::new(),
    };
    let u = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
    Ok(ChatResponse {
        content,
        finish_reason,
        usage: Usage {
            prompt_tokens: u("prompt_tokens"),
            completion_tokens: u("completion_tokens"),
        },
    })
}

impl ChatBackend for HttpChatClient {
    fn backend_id(&self) -> String {
        format!("http:{}@{}", self.transport.config.model, self.transport.config.endpoint)
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let model = if request.model_id.is_empty() {
            &self.transport.config.model
        } else {
            &request.model_id
        };
        let mut body = json!({
            "model": model,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        if let Some(s) = request.seed {
            body["seed"] = json!(s);
        }
        if let Some(m) = request.max_tokens {
            body["max_tokens"] = json!(m);
        }
        debug!(fingerprint = %request.fingerprint(), "chat request");
        parse_chat(&self.transport.post(&body)?)
    }
}

/// Logprob scorer against a completions endpoint that supports echo.
pub struct HttpScorer {
    transport: Transport,
}

impl HttpScorer {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        Ok(HttpScorer { transport: Transport::new(config)? })
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        Self::new(HttpConfig::scorer_from_env()?)
    }
}

fn parse_logprobs(v: &Value) -> Result<Vec<TokenLogprob>, GatewayError> {
    let lp = v
        .pointer("/choices/0/logprobs")
        .ok_or_else(|| GatewayError::Malformed("missing choices[0].logprobs".into()))?;
    let tokens = lp
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Malformed("missing logprobs.tokens".into()))?;
    let values = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Malformed("missing logprobs.token_logprobs".into()))?;
    if tokens.len() != values.len() {
        return Err(GatewayError::Malformed("tokens and token_logprobs differ in length".into()));
    }
    tokens
        .iter()
        .zip(values)
        .enumerate()
        .map(|(i, (t, l))| {
            let token = t
                .as_str()
                .ok_or_else(|| GatewayError::Malformed(format!("token {i} is not a string")))?
                .to_string();
            // Echo endpoints leave the first token unconditioned (null).
            let logprob = match l.as_f64() {
                Some(x) => x,
                None if i == 0 && l.is_null() => 0.0,
                None => return Err(GatewayError::Malformed(format!("logprob {i} missing"))),
            };
            Ok(TokenLogprob { token, logprob })
        })
        .collect()
}

impl LmScorer for HttpScorer {
    fn scorer_id(&self) -> String {
        format!("http:{}@{}", self.transport.config.model, self.transport.config.endpoint)
    }

    fn score_tokens(&self, text: &str) -> Result<Vec<TokenLogprob>, GatewayError> {
        let body = json!({
            "model": self.transport.config.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        parse_logprobs(&self.transport.post(&body)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serve one canned (status, body) per connection, in order.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
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
                bodies.push(String::from_utf8(buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
            bodies
        });
        (addr, handle)
    }

    fn config(endpoint: String) -> HttpConfig {
        HttpConfig {
            endpoint,
            model: "m".into(),
            api_key: Some("k".into()),
            retry: RetryPolicy { max_attempts: 3, base_delay_ms: 1, max_delay_ms: 5 },
            ..Default::default()
        }
    }

    fn request() -> ChatRequest {
        ChatRequest::new("", vec![ChatMessage::user("ping")])
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"pong"},"finish_reason":"stop"}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let (addr, h) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let client = HttpChatClient::new(config(addr)).unwrap();
        let r = client.chat(&request()).unwrap();
        assert_eq!(r.content, "pong");
        assert_eq!(r.usage.prompt_tokens, 3);
        let bodies = h.join().unwrap();
        assert_eq!(bodies.len(), 2);
        assert_eq!(bodies[0], bodies[1]);
        let sent: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn auth_failure_is_fatal() {
        let (addr, h) = serve(vec![(401, "{}".into())]);
        let err = HttpChatClient::new(config(addr)).unwrap().chat(&request()).unwrap_err();
        assert!(matches!(err, GatewayError::Auth { status: 401 }));
        assert!(!err.is_retryable());
        assert_eq!(h.join().unwrap().len(), 1);
    }

    #[test]
    fn rate_limit_exhausts_attempts() {
        let (addr, h) = serve(vec![(429, "{}".into()), (429, "{}".into()), (429, "{}".into())]);
        let err = HttpChatClient::new(config(addr)).unwrap().chat(&request()).unwrap_err();
        assert!(matches!(err, GatewayError::RateLimited { attempts: 3, .. }), "{err:?}");
        h.join().unwrap();
    }

    #[test]
    fn malformed_body() {
        let (addr, h) = serve(vec![(200, r#"{"choices":[]}"#.into())]);
        let err = HttpChatClient::new(config(addr)).unwrap().chat(&request()).unwrap_err();
        assert!(matches!(err, GatewayError::Malformed(_)));
        h.join().unwrap();
    }

    #[test]
    fn scorer_parses_echo_logprobs() {
        let body = r#"{"choices":[{"logprobs":{"tokens":["The"," system"],"token_logprobs":[null,-1.5]}}]}"#;
        let (addr, h) = serve(vec![(200, body.into())]);
        let s = HttpScorer::new(config(addr)).unwrap();
        let out = crate::llm::token_logprobs(&s, "The system").unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].logprob, -1.5);
        let sent: Value = serde_json::from_str(&h.join().unwrap()[0]).unwrap();
        assert_eq!(sent["echo"], true);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_attempts: 5, base_delay_ms: 100, max_delay_ms: 350 };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(350));
    }

    #[test]
    fn bucket_allows_burst_then_throttles() {
        let b = TokenBucket::new(2.0, 10.0);
        assert!(b.reserve().is_zero());
        assert!(b.reserve().is_zero());
        assert!(b.reserve() > Duration::from_millis(50));
    }
}
