#![no_main]

use libfuzzer_sys::fuzz_target;
use stitchkit::nn::NetworkCheckpoint;

fuzz_target!(|text: &str| {
    let Ok(ckpt) = NetworkCheckpoint::from_json(text) else { return };
    let net = ckpt.to_network().expect("from_json validated the shapes");
    let out = net.forward(&vec![0.0; net.input_dim()]).expect("input has the declared width");
    assert_eq!(out.len(), net.output_dim());
});
