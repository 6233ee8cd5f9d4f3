//! Provider-agnostic inference boundary.
//!
//! Two backends: a deterministic [`MockProvider`] and an [`HttpProvider`]
//! speaking the chat-completions JSON shape. Both sit behind [`Gateway`],
//! which caps in-flight requests with a FIFO semaphore.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::hash::Fnv1a64;
use crate::session::{MessageType, TaskPhase};

pub const API_KEY_ENV: &str = "REPLAY_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    ImageUri { uri: String, media_type: String },
    ImageBytes { data: String, media_type: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

/// Which template produced a request. The mock provider echoes these tags;
/// remote providers never see them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMeta {
    pub template: String,
    pub template_version: String,
    pub phase: Option<TaskPhase>,
    pub msg_type: Option<MessageType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub messages: Vec<ChatMessage>,
    pub model_id: String,
    pub max_output_chars: usize,
    pub temperature: f32,
    pub meta: RequestMeta,
    /// Directory that image URIs resolve against when inlining.
    #[serde(skip)]
    pub media_base: Option<PathBuf>,
}

impl ProviderRequest {
    pub fn check(&self) -> Result<(), GatewayError> {
        let systems = self.messages.iter().filter(|m| m.role == Role::System).count();
        if systems != 1 || self.messages.first().map(|m| m.role) != Some(Role::System) {
            return Err(GatewayError::InvalidRequest(
                "exactly one system message, first".into(),
            ));
        }
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest("no user message".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn user_parts(&self) -> impl Iterator<Item = &Part> {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .flat_map(|m| m.parts.iter())
    }

    pub fn image_count(&self) -> usize {
        self.user_parts()
            .filter(|p| !matches!(p, Part::Text { .. }))
            .count()
    }

    pub fn system_text(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .and_then(|m| m.parts.iter().find_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                _ => None,
            }))
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub text: String,
    pub provider_id: String,
    pub latency_ms: u64,
    pub raw_id: Option<String>,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("payload too large for provider")]
    PayloadTooLarge,
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("cannot read image `{uri}`: {source}")]
    Image {
        uri: String,
        source: std::io::Error,
    },
}

/// Hash the mock provider derives its output from: FNV-1a 64 over every user
/// part in order (text bytes, image URI bytes, or inline image data), followed
/// by the decimal count of image parts.
pub fn mock_content_hash(req: &ProviderRequest) -> u64 {
    let mut h = Fnv1a64::new();
    for part in req.user_parts() {
        match part {
            Part::Text { text } => h.update(text.as_bytes()),
            Part::ImageUri { uri, .. } => h.update(uri.as_bytes()),
            Part::ImageBytes { data, .. } => h.update(data.as_bytes()),
        }
    }
    h.update(req.image_count().to_string().as_bytes());
    h.finish()
}

#[derive(Debug, Clone, Default)]
pub struct MockProvider;

impl MockProvider {
    pub const ID: &'static str = "mock";

    pub fn respond(&self, req: &ProviderRequest) -> String {
        let hash = format!("{:016x}", mock_content_hash(req));
        let short = &hash[..8];
        let meta = &req.meta;
        let phase = meta.phase.map_or("-", TaskPhase::name);
        let ty = meta.msg_type.map_or("-", MessageType::name);
        let tag = format!("MOCK[{}|{phase}|{ty}|#{short}]", meta.template);
        if meta.template.starts_with("classify") {
            let idx = (mock_content_hash(req) % TaskPhase::ALL.len() as u64) as usize;
            format!("PHASE: {}\n{tag}", TaskPhase::ALL[idx].name())
        } else {
            tag
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// First backoff delay; doubles on each retry.
    pub backoff_base: Duration,
    pub max_retries: u32,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            api_key,
            timeout: Duration::from_millis(60_000),
            backoff_base: Duration::from_secs(1),
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpProvider {
    config: HttpConfig,
    client: reqwest::Client,
}

enum Attempt {
    Done(ProviderResponse),
    Retry(String),
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::ProviderUnavailable(e.to_string()))?;
        Ok(HttpProvider { config, client })
    }

    pub fn id(&self) -> String {
        format!("http:{}", self.config.endpoint)
    }

    /// Chat-completions body with images inlined as base64 data URLs.
    pub fn wire_body(&self, req: &ProviderRequest) -> Result<Value, GatewayError> {
        let mut messages = Vec::with_capacity(req.messages.len());
        for m in &req.messages {
            let mut content = Vec::with_capacity(m.parts.len());
            for p in &m.parts {
                content.push(match p {
                    Part::Text { text } => json!({"type": "text", "text": text}),
                    Part::ImageBytes { data, media_type } => json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{media_type};base64,{data}")}
                    }),
                    Part::ImageUri { uri, media_type } => {
                        let path = match &req.media_base {
                            Some(base) => base.join(uri),
                            None => PathBuf::from(uri),
                        };
                        let bytes = std::fs::read(&path).map_err(|source| GatewayError::Image {
                            uri: uri.clone(),
                            source,
                        })?;
                        json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{media_type};base64,{}", BASE64.encode(bytes))}
                        })
                    }
                });
            }
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
            };
            messages.push(json!({"role": role, "content": content}));
        }
        Ok(json!({
            "model": req.model_id,
            "messages": messages,
            "temperature": req.temperature,
            // Roughly four characters per token.
            "max_tokens": req.max_output_chars.div_ceil(4).max(1),
        }))
    }

    async fn attempt(&self, key: &str, body: &Value) -> Result<Attempt, GatewayError> {
        let started = Instant::now();
        let resp = match self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(key)
            .json(body)
            .send()
            .await
        {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                return Ok(Attempt::Retry(e.to_string()))
            }
            Err(e) => return Err(GatewayError::ProviderUnavailable(e.to_string())),
        };
        let status = resp.status().as_u16();
        match status {
            401 | 403 => return Err(GatewayError::AuthError(format!("HTTP {status}"))),
            413 => return Err(GatewayError::PayloadTooLarge),
            429 | 500..=599 => return Ok(Attempt::Retry(format!("HTTP {status}"))),
            200..=299 => {}
            _ => {
                let text = resp.text().await.unwrap_or_default();
                return Err(GatewayError::ProviderUnavailable(format!("HTTP {status}: {text}")));
            }
        }
        let value: Value = match resp.json().await {
            Ok(v) => v,
            Err(e) if e.is_timeout() => return Ok(Attempt::Retry(e.to_string())),
            Err(e) => return Err(GatewayError::MalformedResponse(e.to_string())),
        };
        let text = extract_text(&value)
            .ok_or_else(|| GatewayError::MalformedResponse("no choices[0].message.content".into()))?;
        if text.is_empty() {
            return Err(GatewayError::MalformedResponse("empty completion".into()));
        }
        Ok(Attempt::Done(ProviderResponse {
            text,
            provider_id: self.id(),
            latency_ms: started.elapsed().as_millis() as u64,
            raw_id: value.get("id").and_then(Value::as_str).map(str::to_string),
        }))
    }

    pub async fn complete(&self, req: &ProviderRequest) -> Result<ProviderResponse, GatewayError> {
        req.check()?;
        let key = self
            .config
            .api_key
            .as_deref()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::AuthError(format!("{API_KEY_ENV} is not set")))?;
        let body = self.wire_body(req)?;
        let mut delay = self.config.backoff_base;
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                tokio::time::sleep(delay).await;
                delay *= 2;
            }
            match self.attempt(key, &body).await? {
                Attempt::Done(r) => return Ok(r),
                Attempt::Retry(why) => {
                    tracing::warn!(attempt, %why, "transient provider failure");
                    last = why;
                }
            }
        }
        Err(GatewayError::ProviderUnavailable(last))
    }
}

fn extract_text(v: &Value) -> Option<String> {
    let content = v.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub enum Provider {
    Mock(MockProvider),
    Http(HttpProvider),
}

/// Shared entry point; at most `max_in_flight` requests run at once and
/// waiters are served in arrival order.
#[derive(Debug, Clone)]
pub struct Gateway {
    provider: Provider,
    permits: Arc<Semaphore>,
}

impl Gateway {
    pub fn new(provider: Provider, max_in_flight: usize) -> Self {
        Gateway {
            provider,
            permits: Arc::new(Semaphore::new(max_in_flight.max(1))),
        }
    }

    pub fn mock() -> Self {
        Self::new(Provider::Mock(MockProvider), 4)
    }

    pub fn provider_id(&self) -> String {
        match &self.provider {
            Provider::Mock(_) => MockProvider::ID.to_string(),
            Provider::Http(h) => h.id(),
        }
    }

    pub async fn complete(&self, req: &ProviderRequest) -> Result<ProviderResponse, GatewayError> {
        req.check()?;
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|_| GatewayError::ProviderUnavailable("gateway closed".into()))?;
        match &self.provider {
            Provider::Mock(m) => Ok(ProviderResponse {
                text: m.respond(req),
                provider_id: MockProvider::ID.to_string(),
                latency_ms: 0,
                raw_id: None,
            }),
            Provider::Http(h) => h.complete(req).await,
        }
    }
}
