#![no_main]

use libfuzzer_sys::fuzz_target;
use stitchkit::dynamics::parse_manifest;

fuzz_target!(|text: &str| {
    if let Ok(m) = parse_manifest(text) {
        assert!(m.elites.iter().all(|&e| e < m.members.len()));
    }
});
