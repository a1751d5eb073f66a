use std::collections::BTreeMap;

use sparselabel::dict::Dictionary;
use sparselabel::grid::ImageGrid;
use sparselabel::ksvd::MiKsvdConfig;
use sparselabel::network::{train_network_dictionaries, Network, NetworkSpec, SamplingConfig};
use sparselabel::synth::{corpus, SynthConfig};

fn images(n: usize) -> Vec<ImageGrid> {
    let cfg = SynthConfig {
        width: 40,
        height: 36,
        min_radius: 8.0,
        max_radius: 14.0,
        ..SynthConfig::default()
    };
    corpus(21, n, &cfg).into_iter().map(|s| s.image).collect()
}

fn small_spec() -> NetworkSpec {
    NetworkSpec::from_json(
        r#"{"scales": [1.0, 0.5], "channels": 1,
            "layer1": [
              {"name": "a", "side": 3, "atoms": 8, "sparsity": 2, "feeds_layer2": true,
               "pool": {"window": 3, "stride": 2}},
              {"name": "b", "side": 5, "atoms": 6, "sparsity": 1}],
            "layer2": [{"name": "a2", "source": "a", "side": 3, "atoms": 10, "sparsity": 2}],
            "concat": ["a", "b", "a2"]}"#,
    )
    .unwrap()
}

fn train(spec: &NetworkSpec, imgs: &[ImageGrid]) -> BTreeMap<String, Dictionary> {
    let cfg = MiKsvdConfig {
        iterations: 3,
        seed: 5,
        ..Default::default()
    };
    let sampling = SamplingConfig {
        patches_per_dictionary: 1500,
        ..Default::default()
    };
    train_network_dictionaries(imgs, spec, &cfg, &sampling).unwrap()
}

#[test]
fn trained_network_produces_nonnegative_blocked_features() {
    let imgs = images(3);
    let spec = small_spec();
    let dicts = train(&spec, &imgs);
    assert_eq!(dicts.keys().collect::<Vec<_>>(), ["a", "a2", "b"]);
    assert_eq!(dicts, train(&spec, &imgs), "training is deterministic");
    assert_eq!(dicts["a2"].geometry().channels(), 16);

    let net = Network::new(spec.clone(), dicts).unwrap();
    let dim = spec.validate().unwrap();
    assert_eq!(dim, 2 * (16 + 12 + 20));
    let blocks = spec.feature_blocks().unwrap();
    let stack = net.forward(&imgs[0]).unwrap();
    assert_eq!((stack.width(), stack.height(), stack.dim()), (40, 36, dim));
    for cell in stack.cells() {
        assert!(cell.values().iter().all(|&v| v >= 0.0));
        // layer-1 paths contribute at most K nonzeros per scale
        for b in blocks.iter().filter(|b| b.path != "a2") {
            let k = if b.path == "a" { 2 } else { 1 };
            let n = cell.iter().filter(|&(i, _)| i >= b.offset && i < b.offset + b.len).count();
            assert!(n <= k, "{} block has {n} nonzeros", b.path);
        }
    }
    assert_eq!(net.forward(&imgs[0]).unwrap(), stack);
}

#[test]
fn first_layer_features_are_a_prefix_block_of_the_full_network() {
    let imgs = images(2);
    let spec = NetworkSpec::from_json(
        r#"{"scales": [1.0], "channels": 1,
            "layer1": [{"name": "a", "side": 3, "atoms": 8, "sparsity": 2, "feeds_layer2": true,
                        "pool": {"window": 3, "stride": 2}}],
            "layer2": [{"name": "a2", "source": "a", "side": 3, "atoms": 10, "sparsity": 2}],
            "concat": ["a", "a2"]}"#,
    )
    .unwrap();
    let dicts = train(&spec, &imgs);
    let full = Network::new(spec.clone(), dicts.clone()).unwrap();
    let l1_spec = spec.without_layer2();
    let l1_dicts = dicts.into_iter().filter(|(k, _)| k == "a").collect();
    let l1 = Network::new(l1_spec, l1_dicts).unwrap();
    let f = full.forward(&imgs[1]).unwrap();
    let g = l1.forward(&imgs[1]).unwrap();
    assert_eq!(g.dim(), 16);
    for (a, b) in f.cells().iter().zip(g.cells()) {
        let prefix: Vec<(usize, f64)> = a.iter().filter(|&(i, _)| i < 16).collect();
        assert_eq!(prefix, b.iter().collect::<Vec<_>>());
    }
}

#[test]
fn saved_network_reloads_and_cached_grams_match() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = images(2);
    let mut spec = small_spec();
    let dicts = train(&spec, &imgs);
    for p in &mut spec.layer1 {
        p.dictionary = Some(format!("{}.sldc", p.name));
    }
    for p in &mut spec.layer2 {
        p.dictionary = Some(format!("{}.sldc", p.name));
    }
    for (name, d) in &dicts {
        d.save(dir.path().join(format!("{name}.sldc"))).unwrap();
    }
    std::fs::write(dir.path().join("net.json"), spec.to_json().unwrap()).unwrap();
    let loaded = Network::load(NetworkSpec::load(dir.path().join("net.json")).unwrap(), dir.path()).unwrap();
    let cached = Network::with_gram_dir(spec.clone(), dicts.clone(), dir.path().join("grams")).unwrap();
    let fresh = Network::new(spec, dicts).unwrap();
    let expect = fresh.forward(&imgs[0]).unwrap();
    assert_eq!(loaded.forward(&imgs[0]).unwrap(), expect);
    assert_eq!(cached.forward(&imgs[0]).unwrap(), expect);
    assert_eq!(std::fs::read_dir(dir.path().join("grams")).unwrap().count(), 3);
}

#[test]
fn mismatched_dictionaries_are_rejected_and_tiny_images_skipped() {
    let imgs = images(2);
    let spec = small_spec();
    let mut dicts = train(&spec, &imgs);
    let b = dicts.remove("b").unwrap();
    assert!(Network::new(spec.clone(), dicts.clone()).is_err());
    dicts.insert("b".into(), dicts["a"].clone());
    assert!(Network::new(spec.clone(), dicts.clone()).is_err());
    dicts.insert("b".into(), b);
    let net = Network::new(spec, dicts).unwrap();
    // scales smaller than the largest patch contribute zero blocks
    let tiny = ImageGrid::from_fn(4, 4, 1, |x, y, _| ((x + y) % 2) as f64);
    assert_eq!(net.forward(&tiny).unwrap().map().total_nnz(), 0);
    assert!(net.forward(&ImageGrid::zeros(12, 12, 3)).is_err());
}
