//! Free-form judge replies through every reply parser: no panics, and
//! outputs stay inside each parser's vocabulary.

#![no_main]

use libfuzzer_sys::fuzz_target;
use selfdemo::judge::{parse_choice, parse_relevance, parse_score, parse_verdict2, parse_verdict3};
use selfdemo::prompts::parse_proposal;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(score) = parse_score(text) {
        assert!((1..=5).contains(&score));
    }
    let _ = parse_verdict3(text);
    let _ = parse_verdict2(text);
    let _ = parse_relevance(text);
    let _ = parse_choice(text);
    if let Some(proposal) = parse_proposal(text) {
        assert!(!proposal.is_empty());
    }
});
