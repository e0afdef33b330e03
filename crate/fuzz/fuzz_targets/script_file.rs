//! Scripted-gateway script files.

#![no_main]

use libfuzzer_sys::fuzz_target;
use selfdemo::gateway::Script;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = Script::from_json_str(text);
});
