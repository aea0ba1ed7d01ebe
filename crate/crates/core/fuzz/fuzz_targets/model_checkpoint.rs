#![no_main]

use libfuzzer_sys::fuzz_target;
use stitchkit::bc::Policy;
use stitchkit::cvae::InverseCvae;
use stitchkit::value::TwinValue;
use stitchkit::wgan::RewardGan;

// The first byte picks the decoder; the rest is the checkpoint text.
fuzz_target!(|data: &[u8]| {
    let Some((&which, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    match which % 4 {
        0 => drop(InverseCvae::from_json(text)),
        1 => drop(RewardGan::from_json(text)),
        2 => drop(TwinValue::from_json(text)),
        _ => drop(Policy::from_json(text)),
    }
});
