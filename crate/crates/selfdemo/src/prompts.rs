//! Bundled prompt assets: the seed and refusal system messages and the
//! judge templates. Templates are versioned files under `assets/prompts/`
//! so downstream consumers can reproduce requests byte for byte.

use crate::gateway::ChatMessage;
use crate::optimizer::{PromptMode, SystemPrompt};

pub const SEED_WITH_RETRIEVAL: &str = include_str!("../assets/prompts/seed_with_retrieval.txt");
pub const SEED_NO_RETRIEVAL: &str = include_str!("../assets/prompts/seed_no_retrieval.txt");
pub const REFUSAL: &str = include_str!("../assets/prompts/refusal.txt");
pub const JUDGE_SCORE: &str = include_str!("../assets/prompts/judge_score.txt");
pub const JUDGE_PAIRWISE: &str = include_str!("../assets/prompts/judge_pairwise.txt");
pub const JUDGE_VERIFY: &str = include_str!("../assets/prompts/judge_verify.txt");
pub const JUDGE_LABEL: &str = include_str!("../assets/prompts/judge_label.txt");
pub const JUDGE_RELEVANCE: &str = include_str!("../assets/prompts/judge_relevance.txt");
pub const CRITIQUE: &str = include_str!("../assets/prompts/critique.txt");

/// Escalating nudges appended when a score reply does not parse.
pub const SCORE_NUDGES: [&str; 2] = [
    "Reply with only a number from 1 to 5.",
    "Reply with only a single digit from 1 to 5 and nothing else.",
];

/// Escalating nudges for word-verdict replies.
pub const VERDICT_NUDGES: [&str; 2] = [
    "Reply with only the verdict word.",
    "Reply with exactly one word from the list above and nothing else.",
];

/// Escalating nudges for pairwise A/B replies.
pub const CHOICE_NUDGES: [&str; 2] = [
    "Reply with only the letter A or B.",
    "Reply with exactly one uppercase letter, A or B, and nothing else.",
];

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.trim_end().to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// The fixed, human-written system message for the with-retrieval mode.
pub fn seed_with_retrieval() -> SystemPrompt {
    SystemPrompt {
        id: "seed-with-retrieval".into(),
        text: SEED_WITH_RETRIEVAL.trim_end().into(),
        mode: PromptMode::WithRetrieval,
        lineage: None,
    }
}

/// The fixed, human-written system message for the no-retrieval mode.
pub fn seed_no_retrieval() -> SystemPrompt {
    SystemPrompt {
        id: "seed-no-retrieval".into(),
        text: SEED_NO_RETRIEVAL.trim_end().into(),
        mode: PromptMode::NoRetrieval,
        lineage: None,
    }
}

/// The fixed, human-written refusal system message. Never produced or
/// modified by prompt optimization.
pub fn refusal_prompt() -> SystemPrompt {
    SystemPrompt {
        id: "refusal-v1".into(),
        text: REFUSAL.trim_end().into(),
        mode: PromptMode::Refusal,
        lineage: None,
    }
}

pub fn score_request(instruction: &str, gold: &str, output: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(fill(
        JUDGE_SCORE,
        &[("instruction", instruction), ("gold", gold), ("output", output)],
    ))]
}

pub fn pairwise_request(instruction: &str, gold: &str, first: &str, second: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(fill(
        JUDGE_PAIRWISE,
        &[("instruction", instruction), ("gold", gold), ("first", first), ("second", second)],
    ))]
}

pub fn verify_request(instruction: &str, gold: &str, output: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(fill(
        JUDGE_VERIFY,
        &[("instruction", instruction), ("gold", gold), ("output", output)],
    ))]
}

pub fn label_request(instruction: &str, gold: &str, output: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(fill(
        JUDGE_LABEL,
        &[("instruction", instruction), ("gold", gold), ("output", output)],
    ))]
}

pub fn relevance_request(instruction: &str, gold: &str, passage: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(fill(
        JUDGE_RELEVANCE,
        &[("instruction", instruction), ("gold", gold), ("passage", passage)],
    ))]
}

pub fn critique_request(current_prompt: &str, transcript: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::user(fill(
        CRITIQUE,
        &[("prompt", current_prompt), ("transcript", transcript)],
    ))]
}

/// Marker line separating a critique from the proposed system message.
pub const NEW_PROMPT_MARKER: &str = "NEW SYSTEM MESSAGE:";

/// Extract the proposed system message from a critique reply: everything
/// after the last marker line, or the whole reply when the marker is
/// missing. Returns `None` when the result is empty.
pub fn parse_proposal(reply: &str) -> Option<String> {
    let tail = match reply.rfind(NEW_PROMPT_MARKER) {
        Some(pos) => &reply[pos + NEW_PROMPT_MARKER.len()..],
        None => reply,
    };
    let trimmed = tail.trim();
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_string())
    }
}
