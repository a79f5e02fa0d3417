//! OpenAI-compatible chat-completions wire format, transport and model
//! backends.
//!
//! Every model interaction in the harness (streaming sessions, judge calls,
//! synthesis stages) goes through [`ChatModel`]. The HTTP implementation
//! sits on a pluggable [`Transport`] so tests can count or fake requests.

use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MediaUrl {
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: MediaUrl },
    VideoUrl { video_url: MediaUrl },
}

impl ContentPart {
    pub fn text(text: impl Into<String>) -> Self {
        ContentPart::Text { text: text.into() }
    }

    pub fn image(url: impl Into<String>) -> Self {
        ContentPart::ImageUrl {
            image_url: MediaUrl { url: url.into() },
        }
    }

    pub fn video(url: impl Into<String>) -> Self {
        ContentPart::VideoUrl {
            video_url: MediaUrl { url: url.into() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Content {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: Content,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: Content::Text(text.into()),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: Content::Text(text.into()),
        }
    }

    pub fn user_parts(parts: Vec<ContentPart>) -> Self {
        Message {
            role: Role::User,
            content: Content::Parts(parts),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: Content::Text(text.into()),
        }
    }

    pub fn parts(&self) -> impl Iterator<Item = &ContentPart> {
        let parts: &[ContentPart] = match &self.content {
            Content::Parts(p) => p,
            Content::Text(_) => &[],
        };
        parts.iter()
    }

    /// Concatenated text of the message (text parts joined by newlines).
    pub fn text(&self) -> String {
        match &self.content {
            Content::Text(t) => t.clone(),
            Content::Parts(parts) => parts
                .iter()
                .filter_map(|p| match p {
                    ContentPart::Text { text } => Some(text.as_str()),
                    _ => None,
                })
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }
}

/// A chat request without the model id; the backend fills that in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f32,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        ChatRequest {
            messages,
            max_tokens: 512,
            temperature: 0.0,
        }
    }

    pub fn single_user(prompt: impl Into<String>) -> Self {
        ChatRequest::new(vec![Message::user(prompt)])
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    /// Every text fragment of every message, in order.
    pub fn all_text(&self) -> String {
        self.messages
            .iter()
            .map(Message::text)
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Every media URL (image or video part), in order.
    pub fn media_urls(&self) -> Vec<&str> {
        self.messages
            .iter()
            .flat_map(Message::parts)
            .filter_map(|p| match p {
                ContentPart::ImageUrl { image_url } => Some(image_url.url.as_str()),
                ContentPart::VideoUrl { video_url } => Some(video_url.url.as_str()),
                ContentPart::Text { .. } => None,
            })
            .collect()
    }

    /// Wire body: `{model, messages, max_tokens, temperature}`.
    pub fn to_wire(&self, model: &str) -> Value {
        serde_json::json!({
            "model": model,
            "messages": self.messages,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u32>,
}

impl ChatReply {
    pub fn text(content: impl Into<String>) -> Self {
        ChatReply {
            content: content.into(),
            completion_tokens: None,
        }
    }
}

/// Reads `choices[0].message.content` and `usage.completion_tokens`.
pub fn parse_chat_response(body: &[u8]) -> Result<ChatReply, BackendError> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))?;
    let message = value
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message".into()))?;
    let content = match message.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Some(other) => {
            return Err(BackendError::Protocol(format!(
                "unexpected content type: {other}"
            )))
        }
    };
    let completion_tokens = value
        .pointer("/usage/completion_tokens")
        .and_then(Value::as_u64)
        .map(|n| n.min(u32::MAX as u64) as u32);
    Ok(ChatReply {
        content,
        completion_tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportErrorKind {
    Connect,
    Timeout,
    Status(u16),
    Io,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {message}")]
pub struct TransportError {
    pub kind: TransportErrorKind,
    pub message: String,
}

impl TransportError {
    pub fn new(kind: TransportErrorKind, message: impl Into<String>) -> Self {
        TransportError {
            kind,
            message: message.into(),
        }
    }

    /// Connection problems, timeouts, 429 and 5xx are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self.kind {
            TransportErrorKind::Connect | TransportErrorKind::Timeout | TransportErrorKind::Io => {
                true
            }
            TransportErrorKind::Status(code) => code == 429 || code >= 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {last}")]
    Transport { attempts: u32, last: TransportError },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

/// Posts a JSON body and returns the raw response body.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, TransportError>;
}

/// Blocking HTTP transport over a shared connection pool.
#[derive(Clone, Default)]
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport {
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("HttpTransport")
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &[u8],
        timeout: Duration,
    ) -> Result<Vec<u8>, TransportError> {
        let mut req = self
            .client
            .post(url)
            .timeout(timeout)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            let kind = if e.is_timeout() {
                TransportErrorKind::Timeout
            } else if e.is_connect() {
                TransportErrorKind::Connect
            } else {
                TransportErrorKind::Io
            };
            TransportError::new(kind, e.to_string())
        })?;
        let status = resp.status();
        let bytes = resp
            .bytes()
            .map_err(|e| TransportError::new(TransportErrorKind::Io, e.to_string()))?;
        if !status.is_success() {
            let snippet: String = String::from_utf8_lossy(&bytes).chars().take(200).collect();
            return Err(TransportError::new(
                TransportErrorKind::Status(status.as_u16()),
                snippet,
            ));
        }
        Ok(bytes.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    pub fn delay_before(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }
}

/// A chat-completions capable model.
pub trait ChatModel: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError>;
}

impl<M: ChatModel + ?Sized> ChatModel for Arc<M> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }
}

pub struct HttpChatModel {
    config: EndpointConfig,
    transport: Arc<dyn Transport>,
}

impl HttpChatModel {
    pub fn new(config: EndpointConfig, transport: Arc<dyn Transport>) -> Self {
        HttpChatModel { config, transport }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }
}

impl ChatModel for HttpChatModel {
    fn id(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        let body = serde_json::to_vec(&request.to_wire(&self.config.model))
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let policy = self.config.retry;
        let mut attempt = 0;
        loop {
            match self.transport.post_json(
                &self.config.endpoint,
                self.config.api_key.as_deref(),
                &body,
                self.config.timeout,
            ) {
                Ok(bytes) => return parse_chat_response(&bytes),
                Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                    log::warn!(
                        "{} attempt {} failed: {e}; retrying",
                        self.config.endpoint,
                        attempt + 1
                    );
                    thread::sleep(policy.delay_before(attempt));
                    attempt += 1;
                }
                Err(last) => {
                    return Err(BackendError::Transport {
                        attempts: attempt + 1,
                        last,
                    })
                }
            }
        }
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> String + Send + Sync;

/// Deterministic in-process model driven by a closure over the request.
#[derive(Clone)]
pub struct ScriptedChatModel {
    id: String,
    reply: Arc<ReplyFn>,
}

impl ScriptedChatModel {
    pub fn new(
        id: impl Into<String>,
        reply: impl Fn(&ChatRequest) -> String + Send + Sync + 'static,
    ) -> Self {
        ScriptedChatModel {
            id: id.into(),
            reply: Arc::new(reply),
        }
    }
}

impl fmt::Debug for ScriptedChatModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedChatModel")
            .field("id", &self.id)
            .finish()
    }
}

impl ChatModel for ScriptedChatModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, BackendError> {
        Ok(ChatReply::text((self.reply)(request)))
    }
}
