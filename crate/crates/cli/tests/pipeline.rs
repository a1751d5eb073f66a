mod common;

use std::time::Instant;

use common::{dataset, read_dir_bytes};
use sparselabel::bench::{evaluate_boundaries, MatchConfig};
use sparselabel::grid::ImageGrid;
use sparselabel::io::{load_raw, save_png};
use sparselabel::logistic::sigmoid;
use sparselabel::pipeline::benchmark_predictions;
use sparselabel::transfer::predict_labeling;
use sparselabel_cli::bundle::{DictionarySet, ModelBundle};
use sparselabel_cli::commands::{benchmark, infer, inspect, train_dicts, train_transfer, BenchmarkReport, Detections};
use sparselabel_cli::config::{Overrides, RunConfig};
use sparselabel_cli::manifest::Manifest;
use sparselabel_cli::CliError;

fn load(manifest: &std::path::Path, config: &std::path::Path) -> (Manifest, RunConfig) {
    (
        Manifest::load(manifest).unwrap(),
        RunConfig::load(Some(config), Overrides::default()).unwrap(),
    )
}

#[test]
fn single_image_manifest_trains_every_dictionary_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (m, c) = dataset(dir.path(), 1, 0);
    let (manifest, cfg) = load(&m, &c);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let set = train_dicts(&manifest, &cfg, &a).unwrap();
    assert_eq!(set.dictionaries.len(), cfg.network_spec().unwrap().path_names().count());
    train_dicts(&manifest, &cfg, &b).unwrap();
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    assert_eq!(DictionarySet::load(&a).unwrap(), set);
    // a different seed gives different dictionaries
    let other = RunConfig::load(Some(&c), Overrides { seed: Some(12), workers: None }).unwrap();
    let d = dir.path().join("d");
    train_dicts(&manifest, &other, &d).unwrap();
    assert_ne!(read_dir_bytes(&a), read_dir_bytes(&d));
}

#[test]
fn empty_training_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (m, c) = dataset(dir.path(), 0, 2);
    let (manifest, cfg) = load(&m, &c);
    let err = train_dicts(&manifest, &cfg, &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, CliError::EmptyTrainingSplit));
    assert_eq!(err.to_string(), "empty training split");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn transfer_needs_truths() {
    let dir = tempfile::tempdir().unwrap();
    let (m, c) = dataset(dir.path(), 2, 0);
    let (manifest, cfg) = load(&m, &c);
    let dicts = dir.path().join("dicts");
    train_dicts(&manifest, &cfg, &dicts).unwrap();
    let bare = dir.path().join("bare.json");
    std::fs::write(&bare, r#"{"entries": [{"image": "img0.png", "split": "train"}]}"#).unwrap();
    let err = train_transfer(&Manifest::load(&bare).unwrap(), &dicts, &cfg, &dir.path().join("b")).unwrap_err();
    assert!(err.to_string().contains("no truth"), "{err}");
}

#[test]
fn end_to_end_bundle_infer_and_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let (m, c) = dataset(dir.path(), 4, 2);
    let (manifest, cfg) = load(&m, &c);
    let t0 = Instant::now();
    let dicts = dir.path().join("dicts");
    train_dicts(&manifest, &cfg, &dicts).unwrap();
    let b1 = dir.path().join("bundle1");
    let bundle = train_transfer(&manifest, &dicts, &cfg, &b1).unwrap();
    assert!(t0.elapsed().as_secs() < 600, "training took {:?}", t0.elapsed());

    // replay gives the same bundle bytes
    let b2 = dir.path().join("bundle2");
    train_transfer(&manifest, &dicts, &cfg, &b2).unwrap();
    assert_eq!(ModelBundle::content_hash(&b1).unwrap(), ModelBundle::content_hash(&b2).unwrap());
    let loaded = ModelBundle::load(&b1).unwrap();
    assert_eq!(loaded, bundle);
    assert_eq!(loaded.provenance.config_hash, loaded.provenance.config.hash());

    // inference writes map, raw and thinned outputs; repeated runs agree
    let img = dir.path().join("img4.png");
    let o1 = infer(&bundle, &[img.clone()], &dir.path().join("inf1")).unwrap();
    infer(&bundle, &[img.clone()], &dir.path().join("inf2")).unwrap();
    assert_eq!(o1[0].maps.len(), 1);
    assert!(o1[0].thinned.as_ref().unwrap().is_file());
    assert_eq!(read_dir_bytes(&dir.path().join("inf1")), read_dir_bytes(&dir.path().join("inf2")));
    let raw = load_raw(&o1[0].raw).unwrap();
    assert!(raw.data().iter().all(|v| (0.0..=1.0).contains(v)));

    // the benchmark matches the library evaluation of the same predictions
    let report = benchmark(&manifest, Detections::Bundle(&bundle), &MatchConfig::default(), &dir.path().join("bench")).unwrap();
    let BenchmarkReport::Boundaries(curve) = report else { panic!("expected boundaries") };
    let net = bundle.network().unwrap();
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for e in manifest.split(sparselabel_cli::manifest::Split::Test) {
        let img = sparselabel::io::load_image(&e.image).unwrap();
        preds.push(predict_labeling(&net.forward(&img).unwrap(), &bundle.transfer).unwrap());
        truths.push(vec![sparselabel::io::load_mask(&e.truths[0]).unwrap()]);
    }
    let direct = benchmark_predictions(&preds, &truths, &MatchConfig::default()).unwrap();
    assert_eq!(curve, direct);
    for f in ["pr.csv", "pr.json", "pr.png"] {
        assert!(dir.path().join("bench").join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join("bench/pr.csv")).unwrap();
    assert_eq!(csv.lines().count(), 52);
    assert!(curve.ods_f > 0.3, "ODS {}", curve.ods_f);

    let text = inspect(&b1, Some(&dir.path().join("mosaics"))).unwrap();
    assert!(text.contains(&ModelBundle::content_hash(&b1).unwrap()));
    assert!(dir.path().join("mosaics/fine_atoms.png").is_file());
    assert!(dir.path().join("mosaics/fine2_atoms.png").is_file());
}

#[test]
fn constant_image_gives_a_flat_low_map() {
    let dir = tempfile::tempdir().unwrap();
    let (m, c) = dataset(dir.path(), 2, 0);
    let (manifest, cfg) = load(&m, &c);
    let dicts = dir.path().join("dicts");
    train_dicts(&manifest, &cfg, &dicts).unwrap();
    let bundle = train_transfer(&manifest, &dicts, &cfg, &dir.path().join("b")).unwrap();
    let flat = dir.path().join("flat.png");
    save_png(&ImageGrid::from_fn(40, 40, 1, |_, _, _| 0.6), &flat).unwrap();
    let out = infer(&bundle, &[flat], &dir.path().join("inf")).unwrap();
    let map = load_raw(&out[0].raw).unwrap();
    let ceiling = bundle
        .transfer
        .classifiers()
        .iter()
        .map(|c| sigmoid(c.bias))
        .fold(0.0, f64::max)
        + 0.05;
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(hi <= ceiling, "max {hi} above {ceiling}");
    // away from the border every pixel averages the same set of outputs
    let r = bundle.transfer.side() / 2;
    let inner: Vec<f64> = (r..40 - r)
        .flat_map(|y| (r..40 - r).map(move |x| (x, y)))
        .map(|(x, y)| map.get(x, y, 0))
        .collect();
    let spread = inner.iter().copied().fold(f64::NEG_INFINITY, f64::max) - inner.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(spread < 1e-9, "interior not flat: spread {spread}");
}

#[test]
fn bundle_overfits_its_own_training_image() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = dataset(dir.path(), 1, 0);
    let manifest = Manifest::load(&m).unwrap();
    // the bundled compact network has the capacity the tiny one lacks
    let c = dir.path().join("overfit.json");
    std::fs::write(
        &c,
        r#"{"seed": 11, "network": "compact", "dictionary": {"iterations": 4},
            "sampling": {"patches_per_dictionary": 3000},
            "transfer": {"side": 11, "samples": 6000, "solver": {"reg_strength": 0.01}}}"#,
    )
    .unwrap();
    let cfg = RunConfig::load(Some(&c), Overrides::default()).unwrap();
    let dicts = dir.path().join("dicts");
    train_dicts(&manifest, &cfg, &dicts).unwrap();
    let bundle = train_transfer(&manifest, &dicts, &cfg, &dir.path().join("b")).unwrap();
    let e = &manifest.entries[0];
    let img = sparselabel::io::load_image(&e.image).unwrap();
    let truth = sparselabel::io::load_mask(&e.truths[0]).unwrap();
    let pred = predict_labeling(&bundle.network().unwrap().forward(&img).unwrap(), &bundle.transfer).unwrap();
    let curve = benchmark_predictions(&[pred], &[vec![truth]], &MatchConfig::default()).unwrap();
    assert!(curve.ods_f >= 0.9, "F on the training image {}", curve.ods_f);
}

#[test]
fn oracle_and_empty_detections() {
    let dir = tempfile::tempdir().unwrap();
    let (m, _) = dataset(dir.path(), 0, 3);
    let manifest = Manifest::load(&m).unwrap();
    let oracle = dir.path().join("oracle");
    let zero = dir.path().join("zero");
    std::fs::create_dir_all(&oracle).unwrap();
    std::fs::create_dir_all(&zero).unwrap();
    for i in 0..3 {
        std::fs::copy(dir.path().join(format!("img{i}_truth.png")), oracle.join(format!("img{i}.png"))).unwrap();
        save_png(&ImageGrid::zeros(48, 48, 1), zero.join(format!("img{i}.png"))).unwrap();
    }
    let cfg = MatchConfig::default();
    let BenchmarkReport::Boundaries(c) = benchmark(&manifest, Detections::Directory(&oracle), &cfg, &dir.path().join("o")).unwrap() else {
        panic!()
    };
    assert_eq!((c.ods_f, c.ois_f, c.ap), (1.0, 1.0, 1.0));
    let BenchmarkReport::Boundaries(z) = benchmark(&manifest, Detections::Directory(&zero), &cfg, &dir.path().join("z")).unwrap() else {
        panic!()
    };
    assert_eq!(z.ap, 0.0);
    // same numbers as the library evaluator on the raw files
    let items: Vec<(ImageGrid, Vec<ImageGrid>)> = (0..3)
        .map(|i| {
            let t = sparselabel::io::load_mask(dir.path().join(format!("img{i}_truth.png"))).unwrap();
            (t.clone(), vec![t])
        })
        .collect();
    assert_eq!(evaluate_boundaries(&items, &cfg).unwrap(), c);
}
