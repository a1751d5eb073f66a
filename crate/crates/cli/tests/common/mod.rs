#![allow(dead_code)]

use std::path::{Path, PathBuf};

use sparselabel::io::save_png;
use sparselabel::synth::{corpus, SynthConfig};

/// A small network that trains in seconds.
pub const TINY_CONFIG: &str = r#"{
  "seed": 11,
  "network": {
    "scales": [1.0],
    "channels": 1,
    "layer1": [
      {"name": "fine", "side": 5, "atoms": 24, "sparsity": 2, "feeds_layer2": true,
       "pool": {"window": 3, "stride": 2}}
    ],
    "layer2": [{"name": "fine2", "source": "fine", "side": 3, "atoms": 16, "sparsity": 2}],
    "concat": ["fine", "fine2"]
  },
  "dictionary": {"iterations": 4},
  "sampling": {"patches_per_dictionary": 3000},
  "transfer": {"side": 5, "samples": 3000, "solver": {"reg_strength": 0.1}}
}"#;

pub fn synth_config() -> SynthConfig {
    SynthConfig {
        width: 48,
        height: 48,
        min_radius: 8.0,
        max_radius: 18.0,
        ..SynthConfig::default()
    }
}

/// Writes `train + test` synthetic images with boundary truths, the tiny
/// config and a manifest into `dir`; returns (manifest, config).
pub fn dataset(dir: &Path, train: usize, test: usize) -> (PathBuf, PathBuf) {
    let data = corpus(5, train + test, &synth_config());
    let mut entries = Vec::new();
    for (i, s) in data.iter().enumerate() {
        save_png(&s.image, dir.join(format!("img{i}.png"))).unwrap();
        save_png(&s.boundaries, dir.join(format!("img{i}_truth.png"))).unwrap();
        let split = if i < train { "train" } else { "test" };
        entries.push(format!(
            r#"{{"image": "img{i}.png", "truth": "img{i}_truth.png", "split": "{split}"}}"#
        ));
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, format!(r#"{{"entries": [{}]}}"#, entries.join(",\n"))).unwrap();
    let config = dir.join("config.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    (manifest, config)
}

pub fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}
