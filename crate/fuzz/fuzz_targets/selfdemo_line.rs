//! One line of a self-demo file.

#![no_main]

use libfuzzer_sys::fuzz_target;
use selfdemo::engine::SelfDemoRecord;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let Ok(record) = serde_json::from_str::<SelfDemoRecord>(line) else { return };
    let encoded = serde_json::to_string(&record).expect("serializable");
    let reparsed: SelfDemoRecord = serde_json::from_str(&encoded).expect("round-trip parses");
    assert_eq!(record, reparsed);
});
