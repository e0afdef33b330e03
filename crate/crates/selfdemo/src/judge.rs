//! Parsing of judge replies, and the retry-then-fallback driver shared by
//! every judge interaction.
//!
//! Judges reply in free-form prose, so each parser scans for the first
//! standalone token of its vocabulary:
//!
//! - scores: the first maximal digit run whose value is in 1..=5;
//! - verdict words: the first maximal alphabetic run equal
//!   (case-insensitively) to a vocabulary word, so `CORRECT` never matches
//!   inside `INCORRECT`;
//! - pairwise choices: the first standalone uppercase `A` or `B`
//!   (lowercase is ambiguous with the article "a" and is not accepted).
//!
//! When a reply stays unparseable after the configured nudges, [`ask`]
//! returns the caller's pessimistic fallback and flags it.

use crate::gateway::{ChatMessage, Gateway, GatewayError, GenerationParams};

/// Three-way output label vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict3 {
    Correct,
    Refused,
    Incorrect,
}

/// Pairwise presentation slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    First,
    Second,
}

/// First standalone integer in 1..=5, if any.
pub fn parse_score(text: &str) -> Option<u8> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let run = &text[start..i];
            if run.len() == 1 {
                let value = run.as_bytes()[0] - b'0';
                if (1..=5).contains(&value) {
                    return Some(value);
                }
            }
        } else {
            i += 1;
        }
    }
    None
}

fn word_tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphabetic()).filter(|t| !t.is_empty())
}

fn first_vocabulary_word<'a>(text: &str, vocabulary: &[&'a str]) -> Option<&'a str> {
    for token in word_tokens(text) {
        for &word in vocabulary {
            if token.eq_ignore_ascii_case(word) {
                return Some(word);
            }
        }
    }
    None
}

/// First standalone CORRECT / REFUSED / INCORRECT.
pub fn parse_verdict3(text: &str) -> Option<Verdict3> {
    match first_vocabulary_word(text, &["CORRECT", "REFUSED", "INCORRECT"])? {
        "CORRECT" => Some(Verdict3::Correct),
        "REFUSED" => Some(Verdict3::Refused),
        _ => Some(Verdict3::Incorrect),
    }
}

/// First standalone CORRECT / INCORRECT, as a boolean.
pub fn parse_verdict2(text: &str) -> Option<bool> {
    match first_vocabulary_word(text, &["CORRECT", "INCORRECT"])? {
        "CORRECT" => Some(true),
        _ => Some(false),
    }
}

/// First standalone RELEVANT / IRRELEVANT, as a boolean.
pub fn parse_relevance(text: &str) -> Option<bool> {
    match first_vocabulary_word(text, &["RELEVANT", "IRRELEVANT"])? {
        "RELEVANT" => Some(true),
        _ => Some(false),
    }
}

/// First standalone uppercase `A` or `B`.
pub fn parse_choice(text: &str) -> Option<Choice> {
    for token in word_tokens(text) {
        match token {
            "A" => return Some(Choice::First),
            "B" => return Some(Choice::Second),
            _ => {}
        }
    }
    None
}

/// A parsed judge reply, flagged when the pessimistic fallback was used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JudgeReply<T> {
    pub value: T,
    pub fell_back: bool,
}

/// Issue a judge request, retrying with escalating nudges appended to the
/// last user message while the reply stays unparseable. Gateway errors
/// propagate; persistent parse failure yields `fallback`, flagged.
pub fn ask<T>(
    gateway: &(impl Gateway + ?Sized),
    messages: &[ChatMessage],
    params: &GenerationParams,
    sample_index: u32,
    parse: impl Fn(&str) -> Option<T>,
    nudges: &[&str],
    fallback: T,
) -> Result<JudgeReply<T>, GatewayError> {
    for attempt in 0..=nudges.len() {
        let completion = if attempt == 0 {
            gateway.complete(messages, params, sample_index)?
        } else {
            let mut nudged = messages.to_vec();
            match nudged.iter_mut().rev().find(|m| m.role == crate::gateway::Role::User) {
                Some(last_user) => {
                    last_user.content.push_str("\n\n");
                    last_user.content.push_str(nudges[attempt - 1]);
                }
                None => nudged.push(ChatMessage::user(nudges[attempt - 1])),
            }
            gateway.complete(&nudged, params, sample_index)?
        };
        if let Some(value) = parse(&completion.text) {
            return Ok(JudgeReply { value, fell_back: false });
        }
    }
    Ok(JudgeReply { value: fallback, fell_back: true })
}
