//! A gateway whose responses are a pure function of the request.
//!
//! Responses come from, in order: the script table keyed by
//! `(fingerprint, sample_index)`, an optional responder function, and the
//! default behavior (echo the last user message, or fail). Scripted runs
//! never touch the network, which makes full pipeline runs reproducible at
//! desk scale.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    request_fingerprint, validate_messages, ChatMessage, Completion, FinishReason, Gateway,
    GatewayError, GenerationParams, Role,
};

/// What to do for a request not covered by the script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultBehavior {
    /// Fail with [`GatewayError::ScriptedMiss`] naming the fingerprint.
    #[default]
    Error,
    /// Return the last user message verbatim.
    Echo,
}

/// One scripted response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub fingerprint: String,
    #[serde(default)]
    pub sample_index: u32,
    pub text: String,
}

/// Serializable script file: a response table plus the default behavior.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default)]
    pub default_behavior: DefaultBehavior,
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_str(&text).map_err(|e| GatewayError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// The request as seen by a responder function.
pub struct ScriptedRequest<'a> {
    pub messages: &'a [ChatMessage],
    pub params: &'a GenerationParams,
    pub sample_index: u32,
    pub fingerprint: &'a str,
}

impl ScriptedRequest<'_> {
    pub fn system_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

type Responder = dyn Fn(&ScriptedRequest<'_>) -> Option<String> + Send + Sync;

/// One recorded gateway call.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallLogEntry {
    pub fingerprint: String,
    pub sample_index: u32,
}

pub struct ScriptedGateway {
    model_name: String,
    table: HashMap<(String, u32), String>,
    default_behavior: DefaultBehavior,
    responder: Option<Box<Responder>>,
    max_in_flight: usize,
    log: Mutex<Vec<CallLogEntry>>,
}

impl ScriptedGateway {
    pub fn new(script: Script) -> Self {
        let table = script
            .entries
            .into_iter()
            .map(|e| ((e.fingerprint, e.sample_index), e.text))
            .collect();
        Self {
            model_name: script.model_name.unwrap_or_else(|| "scripted".into()),
            table,
            default_behavior: script.default_behavior,
            responder: None,
            max_in_flight: 1,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn empty(default_behavior: DefaultBehavior) -> Self {
        Self::new(Script { default_behavior, ..Script::default() })
    }

    /// Install a responder consulted after the table and before the default.
    /// It must be a pure function of the request for runs to stay
    /// reproducible.
    pub fn with_responder(
        mut self,
        responder: impl Fn(&ScriptedRequest<'_>) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Box::new(responder));
        self
    }

    pub fn with_max_in_flight(mut self, max_in_flight: usize) -> Self {
        self.max_in_flight = max_in_flight.max(1);
        self
    }

    /// All calls so far, sorted by `(fingerprint, sample_index)` so logs
    /// compare equal across runs regardless of scheduling.
    pub fn call_log(&self) -> Vec<CallLogEntry> {
        let mut log = self.log.lock().expect("call log poisoned").clone();
        log.sort();
        log
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("call log poisoned").len()
    }
}

impl Gateway for ScriptedGateway {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        validate_messages(messages)?;
        params.validate()?;
        let fingerprint = request_fingerprint(&self.model_name, messages, params);
        self.log.lock().expect("call log poisoned").push(CallLogEntry {
            fingerprint: fingerprint.clone(),
            sample_index,
        });

        let key = (fingerprint.clone(), sample_index);
        let text = if let Some(text) = self.table.get(&key) {
            Some(text.clone())
        } else {
            let request = ScriptedRequest { messages, params, sample_index, fingerprint: &fingerprint };
            self.responder.as_ref().and_then(|r| r(&request))
        };

        let text = match (text, self.default_behavior) {
            (Some(t), _) => t,
            (None, DefaultBehavior::Echo) => {
                let request = ScriptedRequest { messages, params, sample_index, fingerprint: &fingerprint };
                request.last_user_text().unwrap_or_default().to_string()
            }
            (None, DefaultBehavior::Error) => {
                return Err(GatewayError::ScriptedMiss { fingerprint, sample_index })
            }
        };
        Ok(Completion { text, finish_reason: FinishReason::Stop, request_fingerprint: fingerprint })
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{complete_many, BatchRequest};

    fn msgs(user: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::user(user)]
    }

    #[test]
    fn echo_default_returns_last_user_message() {
        let gw = ScriptedGateway::empty(DefaultBehavior::Echo);
        let m = vec![ChatMessage::system("s"), ChatMessage::user("first"), ChatMessage::user("second")];
        let c = gw.complete(&m, &GenerationParams::default(), 0).unwrap();
        assert_eq!(c.text, "second");
    }

    #[test]
    fn table_lookup_consumes_scripted_entries() {
        let params = GenerationParams::default();
        let entries = ["one", "two", "three"]
            .iter()
            .map(|t| ScriptEntry {
                fingerprint: request_fingerprint("scripted", &msgs(t), &params),
                sample_index: 0,
                text: format!("reply-{t}"),
            })
            .collect();
        let gw = ScriptedGateway::new(Script {
            model_name: None,
            default_behavior: DefaultBehavior::Error,
            entries,
        });
        for t in ["one", "two", "three"] {
            assert_eq!(gw.complete(&msgs(t), &params, 0).unwrap().text, format!("reply-{t}"));
        }
    }

    #[test]
    fn miss_with_error_default_names_fingerprint() {
        let gw = ScriptedGateway::empty(DefaultBehavior::Error);
        let params = GenerationParams::default();
        let expected = request_fingerprint("scripted", &msgs("q"), &params);
        match gw.complete(&msgs("q"), &params, 3) {
            Err(GatewayError::ScriptedMiss { fingerprint, sample_index }) => {
                assert_eq!(fingerprint, expected);
                assert_eq!(sample_index, 3);
            }
            other => panic!("expected scripted miss, got {other:?}"),
        }
    }

    #[test]
    fn responder_distinguishes_sample_indices() {
        let gw = ScriptedGateway::empty(DefaultBehavior::Error)
            .with_responder(|req| Some(format!("sample {}", req.sample_index)));
        let params = GenerationParams::default();
        assert_eq!(gw.complete(&msgs("q"), &params, 0).unwrap().text, "sample 0");
        assert_eq!(gw.complete(&msgs("q"), &params, 7).unwrap().text, "sample 7");
    }

    #[test]
    fn batch_matches_sequential_completion() {
        let gw = ScriptedGateway::empty(DefaultBehavior::Echo).with_max_in_flight(4);
        let params = GenerationParams::default();
        let batch: Vec<BatchRequest> = (0..20)
            .map(|i| BatchRequest {
                messages: msgs(&format!("item {i}")),
                params: params.clone(),
                sample_index: 0,
            })
            .collect();
        let results = complete_many(&gw, &batch);
        for (i, r) in results.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().text, format!("item {i}"));
        }
    }

    #[test]
    fn singleton_batch_equals_complete() {
        let gw = ScriptedGateway::empty(DefaultBehavior::Echo);
        let params = GenerationParams::default();
        let direct = gw.complete(&msgs("solo"), &params, 0).unwrap();
        let batch = complete_many(
            &gw,
            &[BatchRequest { messages: msgs("solo"), params, sample_index: 0 }],
        );
        assert_eq!(batch[0].as_ref().unwrap(), &direct);
    }

    #[test]
    fn call_log_is_sorted_and_deterministic() {
        let run = || {
            let gw = ScriptedGateway::empty(DefaultBehavior::Echo).with_max_in_flight(4);
            let params = GenerationParams::default();
            let batch: Vec<BatchRequest> = (0..16)
                .map(|i| BatchRequest {
                    messages: msgs(&format!("q{i}")),
                    params: params.clone(),
                    sample_index: 0,
                })
                .collect();
            let _ = complete_many(&gw, &batch);
            gw.call_log()
        };
        assert_eq!(run(), run());
    }
}
