//! OpenAI-compatible chat-completions client.
//!
//! `POST {base_url}/v1/chat/completions` with a JSON body of
//! `{model, messages, temperature, top_p, max_tokens, n, seed?}` and an
//! optional bearer token read from the environment variable named in the
//! endpoint config. The completion text is read from
//! `choices[0].message.content`.
//!
//! Retryable failures are timeouts, connection errors, and HTTP 429/5xx;
//! they back off exponentially from `backoff_base`. Any other non-success
//! status is a protocol error returned immediately.

use std::sync::{Condvar, Mutex};

use serde::Deserialize;

use super::{
    validate_messages, ChatMessage, Completion, EndpointConfig, FinishReason, Gateway,
    GatewayError, GenerationParams,
};

/// Counting semaphore capping concurrent requests to the endpoint, so the
/// `max_in_flight` bound holds globally even when several batches (or
/// parallel pipeline stages) share one gateway.
struct InFlightGate {
    permits: Mutex<usize>,
    released: Condvar,
}

impl InFlightGate {
    fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits), released: Condvar::new() }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut permits = self.permits.lock().expect("gate poisoned");
        while *permits == 0 {
            permits = self.released.wait(permits).expect("gate poisoned");
        }
        *permits -= 1;
        InFlightPermit { gate: self }
    }
}

struct InFlightPermit<'a> {
    gate: &'a InFlightGate,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.gate.permits.lock().expect("gate poisoned") += 1;
        self.gate.released.notify_one();
    }
}

pub struct HttpGateway {
    config: EndpointConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

enum AttemptFailure {
    Timeout,
    Transport(String),
    RetryableStatus(u16, String),
}

impl HttpGateway {
    /// Build a client for the endpoint. Fails fast when the named API-key
    /// environment variable is missing.
    pub fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| GatewayError::MissingEnv(var.clone()))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| GatewayError::Transport { attempts: 0, message: e.to_string() })?;
        let gate = InFlightGate::new(config.max_in_flight);
        Ok(Self { config, api_key, client, gate })
    }

    fn request_url(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(
        &self,
        body: &serde_json::Value,
    ) -> Result<Result<Completion, AttemptFailure>, GatewayError> {
        let mut req = self.client.post(self.request_url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let response = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Ok(Err(AttemptFailure::Timeout)),
            Err(e) => return Ok(Err(AttemptFailure::Transport(e.to_string()))),
        };

        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Ok(Err(AttemptFailure::Timeout)),
            Err(e) => return Ok(Err(AttemptFailure::Transport(e.to_string()))),
        };

        if status.as_u16() == 429 || status.is_server_error() {
            return Ok(Err(AttemptFailure::RetryableStatus(status.as_u16(), text)));
        }
        if !status.is_success() {
            return Err(GatewayError::Protocol {
                status: status.as_u16(),
                message: truncate(&text, 500),
            });
        }

        let wire: WireResponse = serde_json::from_str(&text).map_err(|e| GatewayError::Protocol {
            status: status.as_u16(),
            message: format!("unparseable response body: {e}"),
        })?;
        let choice = wire.choices.into_iter().next().ok_or_else(|| GatewayError::Protocol {
            status: status.as_u16(),
            message: "response contained no choices".into(),
        })?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        Ok(Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            finish_reason,
            request_fingerprint: String::new(),
        }))
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

impl Gateway for HttpGateway {
    fn model_name(&self) -> &str {
        &self.config.model_name
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        _sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        validate_messages(messages)?;
        params.validate()?;
        let fingerprint = super::request_fingerprint(&self.config.model_name, messages, params);

        let mut body = serde_json::json!({
            "model": self.config.model_name,
            "messages": messages
                .iter()
                .map(|m| serde_json::json!({"role": m.role.as_str(), "content": m.content}))
                .collect::<Vec<_>>(),
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "n": 1,
        });
        if let Some(seed) = params.seed {
            body["seed"] = serde_json::json!(seed);
        }

        let attempts = self.config.max_retries + 1;
        let mut last_failure = AttemptFailure::Transport("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.config.backoff_base * 2u32.saturating_pow(attempt - 1);
                std::thread::sleep(backoff);
            }
            let _permit = self.gate.acquire();
            match self.attempt(&body)? {
                Ok(mut completion) => {
                    completion.request_fingerprint = fingerprint;
                    return Ok(completion);
                }
                Err(failure) => {
                    log::warn!(
                        "attempt {}/{attempts} against {} failed: {}",
                        attempt + 1,
                        self.config.base_url,
                        match &failure {
                            AttemptFailure::Timeout => "timeout".to_string(),
                            AttemptFailure::Transport(m) => m.clone(),
                            AttemptFailure::RetryableStatus(s, _) => format!("status {s}"),
                        }
                    );
                    last_failure = failure;
                }
            }
        }
        Err(match last_failure {
            AttemptFailure::Timeout => GatewayError::Timeout { attempts },
            AttemptFailure::Transport(message) => GatewayError::Transport { attempts, message },
            AttemptFailure::RetryableStatus(status, message) => GatewayError::Transport {
                attempts,
                message: format!("exhausted retries on status {status}: {}", truncate(&message, 200)),
            },
        })
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }
}
