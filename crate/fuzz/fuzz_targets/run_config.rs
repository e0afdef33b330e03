//! Run-config documents, including `${VAR}` interpolation edge cases.

#![no_main]

use libfuzzer_sys::fuzz_target;
use selfdemo::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = RunConfig::from_json_str(text);
});
