#![no_main]

use libfuzzer_sys::fuzz_target;
use stitchkit::experiment::ExperimentConfig;

fuzz_target!(|text: &str| {
    let Ok(config) = ExperimentConfig::parse(text) else { return };
    let _ = config.validate();
    let back = ExperimentConfig::parse(&config.to_text()).expect("resolved config parses");
    // NaN fields never compare equal, so compare the rendered form.
    assert_eq!(back.to_text(), config.to_text());
});
