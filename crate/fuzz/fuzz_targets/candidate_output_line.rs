//! One line of a candidate-output file (`{instance_id, output}`).

#![no_main]

use libfuzzer_sys::fuzz_target;
use selfdemo::pipeline::CandidateOutput;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let _ = serde_json::from_str::<CandidateOutput>(line);
});
