//! One line of a corpus file: must never panic, and accepted records must
//! satisfy the documented invariants and survive a serialize/parse cycle.

#![no_main]

use libfuzzer_sys::fuzz_target;
use selfdemo::corpus::Instance;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let Ok(instance) = serde_json::from_str::<Instance>(line) else { return };
    // Round-trip: a parsed record re-serializes and re-parses identically.
    let encoded = serde_json::to_string(&instance).expect("serializable");
    let reparsed: Instance = serde_json::from_str(&encoded).expect("round-trip parses");
    assert_eq!(instance, reparsed);
});
