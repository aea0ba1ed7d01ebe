#![no_main]

use libfuzzer_sys::fuzz_target;
use stitchkit::data::{parse_dataset, to_jsonl};

fuzz_target!(|text: &str| {
    let Ok(ds) = parse_dataset(text) else { return };
    // Anything accepted must survive a write and re-read unchanged.
    let written = to_jsonl(&ds).expect("valid dataset serializes");
    let back = parse_dataset(&written).expect("own output parses");
    assert_eq!(back, ds);
});
