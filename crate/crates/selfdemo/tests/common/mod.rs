//! Shared scaffolding for integration tests: scripted model worlds, a
//! fault-injecting gateway wrapper, and a minimal HTTP stub server.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use selfdemo::corpus::{load_corpus, Corpus, SCHEMA_VERSION};
use selfdemo::gateway::{
    ChatMessage, Completion, DefaultBehavior, Gateway, GatewayError, GenerationParams,
    ScriptedGateway,
};
use selfdemo::prompts;

pub fn toy_corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_corpus.jsonl")
}

pub fn toy_corpus() -> Corpus {
    load_corpus(&toy_corpus_path(), SCHEMA_VERSION).expect("bundled toy corpus loads")
}

/// Text between two markers (first occurrences), or everything after
/// `start` when `end` is missing.
pub fn section(text: &str, start: &str, end: &str) -> String {
    let from = text.find(start).map(|p| p + start.len()).unwrap_or(0);
    let rest = &text[from..];
    let to = rest.find(end).unwrap_or(rest.len());
    rest[..to].to_string()
}

fn byte_sum(text: &str) -> u64 {
    text.bytes().map(u64::from).sum()
}

/// The instruction as seen in a rendered user prompt: after the last
/// `Question: ` header when present, the whole message otherwise.
fn instruction_of(user: &str) -> &str {
    match user.rfind("Question: ") {
        Some(pos) => &user[pos + "Question: ".len()..],
        None => user,
    }
}

/// A deterministic, content-addressed model world over a corpus.
///
/// Generation requests (any request that is not one of the judge or
/// critique templates):
/// - under the refusal system prompt: a fixed refusal sentence;
/// - under an answer system prompt: the gold response, except that
///   instances whose instruction byte-sum is divisible by four never get a
///   correct candidate, and otherwise each prompt is wrong when
///   `(len(system) + h) % 3 == 0` — so tournaments see mixed candidates;
/// - with no system prompt (evaluation candidates): the gold response when
///   a planted passage is in context, a refusal when `h % 3 == 0`, and a
///   wrong answer otherwise.
///
/// Judge requests apply exact-match semantics against the gold response;
/// relevance checks look for the toy corpus plant marker; critiques
/// propose the parent prompt text plus a version suffix.
pub fn semantic_world(corpus: &Corpus) -> ScriptedGateway {
    let gold_by_instruction: BTreeMap<String, String> = corpus
        .instances
        .iter()
        .map(|i| (i.instruction.clone(), i.gold_response.clone()))
        .collect();
    let refusal_text = prompts::refusal_prompt().text;

    ScriptedGateway::empty(DefaultBehavior::Error).with_responder(move |req| {
        let user = req.last_user_text()?;

        if user.starts_with("Rate how well") {
            let gold = section(user, "Reference answer:\n", "\n\nCandidate response:");
            let output = section(user, "Candidate response:\n", "\n\nReply with");
            return Some(if output == gold { "Score: 5".into() } else { "Score: 2".into() });
        }
        if user.starts_with("Two candidate responses") {
            let gold = section(user, "Reference answer:\n", "\n\nResponse A:");
            let a = section(user, "Response A:\n", "\n\nResponse B:");
            let b = section(user, "Response B:\n", "\n\nReply with");
            let a_wins = if a == gold {
                true
            } else if b == gold {
                false
            } else {
                a.len() >= b.len()
            };
            return Some(if a_wins { "A".into() } else { "B".into() });
        }
        if user.starts_with("Decide whether the candidate") {
            let gold = section(user, "Reference answer:\n", "\n\nCandidate response:");
            let output = section(user, "Candidate response:\n", "\n\nReply with");
            return Some(if output == gold { "CORRECT".into() } else { "INCORRECT".into() });
        }
        if user.starts_with("Classify the model output") {
            let gold = section(user, "Reference answer:\n", "\n\nModel output:");
            let output = section(user, "Model output:\n", "\n\nReply with");
            return Some(if output == gold {
                "CORRECT".into()
            } else if output.contains("cannot") || output.contains("unable") {
                "REFUSED".into()
            } else {
                "INCORRECT".into()
            });
        }
        if user.starts_with("Decide whether the passage") {
            let passage = section(user, "Passage:\n", "\n\nReply with");
            return Some(if passage.contains("answer recorded here") {
                "RELEVANT".into()
            } else {
                "IRRELEVANT".into()
            });
        }
        if user.starts_with("You are improving") {
            let parent = section(user, "Current system message:\n", "\n\nBelow are");
            return Some(format!(
                "The message could be more specific.\n{}\n{} [v{}]",
                prompts::NEW_PROMPT_MARKER,
                parent,
                req.sample_index
            ));
        }

        // Generation request.
        let instruction = instruction_of(user);
        let gold = gold_by_instruction
            .get(instruction)
            .cloned()
            .unwrap_or_else(|| "unknown".into());
        let h = byte_sum(instruction) % 4;
        match req.system_text() {
            Some(system) if system == refusal_text => {
                Some("I cannot answer this reliably from the given context.".into())
            }
            Some(system) => {
                if h == 0 || (system.len() as u64 + h).is_multiple_of(3) {
                    Some(format!("A plausible but wrong answer ({h})."))
                } else {
                    Some(gold)
                }
            }
            None => {
                if user.contains("answer recorded here") {
                    Some(gold)
                } else if h.is_multiple_of(3) {
                    Some("I cannot say from the provided context.".into())
                } else {
                    Some(format!("An unsupported guess ({h})."))
                }
            }
        }
    })
}

/// Instances the semantic world never answers correctly (forced refusals).
pub fn forced_refusal_ids(corpus: &Corpus) -> Vec<String> {
    corpus
        .instances
        .iter()
        .filter(|i| byte_sum(&i.instruction).is_multiple_of(4))
        .map(|i| i.id.clone())
        .collect()
}

/// A reference-model world that always answers with the gold response.
pub fn oracle_reference_world(corpus: &Corpus) -> ScriptedGateway {
    let gold_by_instruction: BTreeMap<String, String> = corpus
        .instances
        .iter()
        .map(|i| (i.instruction.clone(), i.gold_response.clone()))
        .collect();
    ScriptedGateway::empty(DefaultBehavior::Error).with_responder(move |req| {
        let user = req.last_user_text()?;
        Some(
            gold_by_instruction
                .get(instruction_of(user))
                .cloned()
                .unwrap_or_else(|| "unknown".into()),
        )
    })
}

/// Delegates to the inner gateway for the first `budget` calls, then fails
/// every call with a transport error. Used to simulate interruption;
/// wrapped inside a `CachedGateway` it exercises resumption.
pub struct FailAfter<G> {
    inner: G,
    remaining: AtomicU64,
}

impl<G> FailAfter<G> {
    pub fn new(inner: G, budget: u64) -> Self {
        Self { inner, remaining: AtomicU64::new(budget) }
    }
}

impl<G: Gateway> Gateway for FailAfter<G> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        let left = self.remaining.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| {
            v.checked_sub(1)
        });
        match left {
            Ok(_) => self.inner.complete(messages, params, sample_index),
            Err(_) => Err(GatewayError::Transport {
                attempts: 1,
                message: "simulated interruption".into(),
            }),
        }
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}

/// How the stub server answers one request.
pub enum StubReply {
    /// JSON chat completion with this content.
    Ok(String),
    /// Bare status code with a plain body.
    Status(u16),
}

type StubHandler = dyn Fn(u64, &str) -> StubReply + Send + Sync;

/// Minimal HTTP/1.1 chat-completions stub. Tracks total requests and peak
/// concurrency; the handler sees the request ordinal and body.
pub struct StubServer {
    addr: String,
    hits: Arc<AtomicU64>,
    peak: Arc<AtomicUsize>,
    shutdown: Arc<std::sync::atomic::AtomicBool>,
}

impl StubServer {
    pub fn start(handler: impl Fn(u64, &str) -> StubReply + Send + Sync + 'static) -> Self {
        Self::start_with_delay(handler, std::time::Duration::ZERO)
    }

    pub fn start_with_delay(
        handler: impl Fn(u64, &str) -> StubReply + Send + Sync + 'static,
        hold: std::time::Duration,
    ) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicU64::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let handler: Arc<StubHandler> = Arc::new(handler);

        {
            let hits = hits.clone();
            let peak = peak.clone();
            let shutdown = shutdown.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { break };
                    let hits = hits.clone();
                    let peak = peak.clone();
                    let in_flight = in_flight.clone();
                    let handler = handler.clone();
                    std::thread::spawn(move || {
                        let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                        peak.fetch_max(now, Ordering::SeqCst);
                        if !hold.is_zero() {
                            std::thread::sleep(hold);
                        }
                        let ordinal = hits.fetch_add(1, Ordering::SeqCst);
                        let _ = serve_one(stream, ordinal, handler.as_ref());
                        in_flight.fetch_sub(1, Ordering::SeqCst);
                    });
                }
            });
        }
        Self { addr, hits, peak, shutdown }
    }

    pub fn base_url(&self) -> &str {
        &self.addr
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        if let Ok(addr) = self.addr.trim_start_matches("http://").parse::<std::net::SocketAddr>() {
            let _ = TcpStream::connect(addr);
        }
    }
}

fn serve_one(stream: TcpStream, ordinal: u64, handler: &StubHandler) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    let mut content_length = 0usize;
    reader.read_line(&mut line)?; // request line
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 {
            break;
        }
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some(value) = header.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    let body = String::from_utf8_lossy(&body).into_owned();

    let (status_line, payload) = match handler(ordinal, &body) {
        StubReply::Ok(content) => {
            let payload = serde_json::json!({
                "choices": [{
                    "message": {"role": "assistant", "content": content},
                    "finish_reason": "stop",
                }]
            })
            .to_string();
            ("HTTP/1.1 200 OK", payload)
        }
        StubReply::Status(code) => {
            let reason = match code {
                401 => "Unauthorized",
                429 => "Too Many Requests",
                500 => "Internal Server Error",
                _ => "Error",
            };
            // Leak a tiny formatted status line per distinct code; fine in tests.
            let line: &'static str =
                Box::leak(format!("HTTP/1.1 {code} {reason}").into_boxed_str());
            (line, format!("{{\"error\": \"{reason}\"}}"))
        }
    };
    let mut stream = stream;
    write!(
        stream,
        "{status_line}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    stream.flush()
}
