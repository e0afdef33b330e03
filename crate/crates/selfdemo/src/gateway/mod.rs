//! Uniform access to chat-completion inference endpoints.
//!
//! Three implementations of [`Gateway`]:
//!
//! - [`HttpGateway`] speaks the OpenAI-compatible chat-completions wire
//!   protocol with retries and exponential backoff.
//! - [`ScriptedGateway`] answers from a table (or a pure responder
//!   function) keyed by request fingerprint and sample index; it never
//!   performs network I/O and makes the whole pipeline runnable at desk
//!   scale.
//! - [`CachedGateway`] wraps either with an on-disk call cache keyed by
//!   `(fingerprint, sample_index)`, making runs resumable and
//!   byte-reproducible.
//!
//! A request's identity is its [`request_fingerprint`]: a SHA-256 over the
//! canonical JSON of `(model, messages, params)`. Sampling multiplicity is
//! expressed by an explicit `sample_index` folded into cache and script
//! keys rather than relying on server-side seeds.

mod cache;
mod http;
mod scripted;

pub use cache::CachedGateway;
pub use http::HttpGateway;
pub use scripted::{CallLogEntry, DefaultBehavior, Script, ScriptEntry, ScriptedGateway, ScriptedRequest};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Connection settings for one OpenAI-compatible endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub request_timeout: Duration,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight < 1 {
            return Err(GatewayError::InvalidRequest(
                "max_in_flight must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One message of a chat request. System and user messages must be
/// non-empty (checked when the request is issued).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Sampling parameters for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_top_p() -> f64 {
    1.0
}

fn default_max_tokens() -> u32 {
    1024
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 0.0, top_p: 1.0, max_tokens: 1024, seed: None }
    }
}

impl GenerationParams {
    pub fn with_temperature(temperature: f64) -> Self {
        Self { temperature, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "top_p {} must be in (0, 1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// One completion, tagged with the content-addressed fingerprint of the
/// request that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub request_fingerprint: String,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint returned non-retryable status {status}: {message}")]
    Protocol { status: u16, message: String },
    #[error("no scripted response for fingerprint {fingerprint} sample {sample_index}")]
    ScriptedMiss { fingerprint: String, sample_index: u32 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("call cache error at {path}: {message}")]
    Cache { path: String, message: String },
}

/// Validate the message sequence shared by all gateway implementations.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), GatewayError> {
    if messages.is_empty() {
        return Err(GatewayError::InvalidRequest("empty message list".into()));
    }
    for m in messages {
        if m.content.is_empty() && matches!(m.role, Role::System | Role::User) {
            return Err(GatewayError::InvalidRequest(format!(
                "{} message with empty content",
                m.role.as_str()
            )));
        }
    }
    Ok(())
}

/// Content-addressed identity of a request: SHA-256 over the canonical
/// JSON of `(model, messages, temperature, top_p, max_tokens, seed)`.
/// Stable across processes and machines.
pub fn request_fingerprint(model: &str, messages: &[ChatMessage], params: &GenerationParams) -> String {
    let canonical = serde_json::json!({
        "max_tokens": params.max_tokens,
        "messages": messages
            .iter()
            .map(|m| serde_json::json!({"content": m.content, "role": m.role.as_str()}))
            .collect::<Vec<_>>(),
        "model": model,
        "seed": params.seed,
        "temperature": params.temperature,
        "top_p": params.top_p,
    });
    let mut hasher = Sha256::new();
    hasher.update(canonical.to_string().as_bytes());
    hex::encode(hasher.finalize())
}

/// A chat-completion backend. Implementations are shareable across threads.
pub trait Gateway: Send + Sync {
    fn model_name(&self) -> &str;

    /// Complete one request. `sample_index` distinguishes repeated samples
    /// of the same request; it does not change the wire request.
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError>;

    /// Bound on concurrent requests honored by [`complete_many`].
    fn max_in_flight(&self) -> usize {
        1
    }
}

impl<G: Gateway + ?Sized> Gateway for &G {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        (**self).complete(messages, params, sample_index)
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

impl<G: Gateway + ?Sized> Gateway for std::sync::Arc<G> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        (**self).complete(messages, params, sample_index)
    }
    fn max_in_flight(&self) -> usize {
        (**self).max_in_flight()
    }
}

/// One item of a [`complete_many`] batch.
#[derive(Debug, Clone)]
pub struct BatchRequest {
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
    pub sample_index: u32,
}

/// Run a batch with at most `gateway.max_in_flight()` requests outstanding.
/// Results are positionally aligned with the inputs regardless of
/// completion order, and per-item errors do not abort the batch.
pub fn complete_many(
    gateway: &(impl Gateway + ?Sized),
    batch: &[BatchRequest],
) -> Vec<Result<Completion, GatewayError>> {
    if batch.is_empty() {
        return Vec::new();
    }
    let workers = gateway.max_in_flight().max(1).min(batch.len());
    if workers == 1 {
        return batch
            .iter()
            .map(|r| gateway.complete(&r.messages, &r.params, r.sample_index))
            .collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Completion, GatewayError>>>> =
        (0..batch.len()).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= batch.len() {
                    break;
                }
                let req = &batch[i];
                let result = gateway.complete(&req.messages, &req.params, req.sample_index);
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot poisoned").expect("worker filled every slot"))
        .collect()
}
