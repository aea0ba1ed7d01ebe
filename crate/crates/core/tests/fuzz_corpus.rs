//! Replays the checked-in fuzz corpus through the same decoders the fuzz
//! targets drive, plus a few hand-mutated inputs.

use std::fs;
use std::path::PathBuf;

use stitchkit::bc::Policy;
use stitchkit::cvae::InverseCvae;
use stitchkit::data::{parse_dataset, to_jsonl};
use stitchkit::dynamics::parse_manifest;
use stitchkit::experiment::ExperimentConfig;
use stitchkit::nn::NetworkCheckpoint;
use stitchkit::value::TwinValue;
use stitchkit::wgan::RewardGan;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus for {target}");
    files
        .into_iter()
        .map(|p| (p.display().to_string(), fs::read(&p).unwrap()))
        .collect()
}

/// Truncations and byte flips of a seed; none may panic.
fn mutations(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for cut in [0, 1, seed.len() / 3, seed.len() / 2, seed.len().saturating_sub(1)] {
        out.push(seed[..cut.min(seed.len())].to_vec());
    }
    for i in (0..seed.len()).step_by((seed.len() / 16).max(1)) {
        let mut m = seed.to_vec();
        m[i] ^= 0x5a;
        out.push(m);
    }
    out
}

#[test]
fn dataset_seeds_round_trip() {
    for (name, bytes) in corpus("dataset_jsonl") {
        let text = String::from_utf8(bytes.clone()).unwrap();
        let ds = parse_dataset(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(parse_dataset(&to_jsonl(&ds).unwrap()).unwrap(), ds);
        for m in mutations(&bytes) {
            if let Ok(t) = String::from_utf8(m) {
                if let Ok(ds) = parse_dataset(&t) {
                    assert_eq!(parse_dataset(&to_jsonl(&ds).unwrap()).unwrap(), ds);
                }
            }
        }
    }
}

#[test]
fn config_seeds_round_trip() {
    for (name, bytes) in corpus("experiment_config") {
        let text = String::from_utf8(bytes.clone()).unwrap();
        let c = ExperimentConfig::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        for m in mutations(&bytes) {
            if let Ok(t) = String::from_utf8(m) {
                if let Ok(c) = ExperimentConfig::parse(&t) {
                    let _ = c.validate();
                    assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap().to_text(), c.to_text());
                }
            }
        }
    }
}

#[test]
fn network_checkpoint_seeds_decode() {
    for (name, bytes) in corpus("network_checkpoint") {
        let text = String::from_utf8(bytes.clone()).unwrap();
        let net = NetworkCheckpoint::from_json(&text)
            .and_then(|c| c.to_network())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(net.forward(&vec![0.0; net.input_dim()]).unwrap().len(), net.output_dim());
        for m in mutations(&bytes) {
            if let Ok(c) = NetworkCheckpoint::from_json(&String::from_utf8_lossy(&m)) {
                let net = c.to_network().unwrap();
                net.forward(&vec![0.0; net.input_dim()]).unwrap();
            }
        }
    }
}

#[test]
fn manifest_seeds_decode() {
    for (name, bytes) in corpus("dynamics_manifest") {
        let m = parse_manifest(&String::from_utf8(bytes.clone()).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(m.elites.iter().all(|&e| e < m.members.len()));
        for m in mutations(&bytes) {
            if let Ok(m) = parse_manifest(&String::from_utf8_lossy(&m)) {
                assert!(m.elites.iter().all(|&e| e < m.members.len()));
            }
        }
    }
}

#[test]
fn model_checkpoint_seeds_decode() {
    let decode = |which: u8, text: &str| -> bool {
        match which % 4 {
            0 => InverseCvae::from_json(text).is_ok(),
            1 => RewardGan::from_json(text).is_ok(),
            2 => TwinValue::from_json(text).is_ok(),
            _ => Policy::from_json(text).is_ok(),
        }
    };
    for (name, bytes) in corpus("model_checkpoint") {
        let (&which, rest) = bytes.split_first().unwrap();
        assert!(decode(which, std::str::from_utf8(rest).unwrap()), "{name}");
        for m in mutations(rest) {
            decode(which, &String::from_utf8_lossy(&m));
        }
    }
}
