use std::sync::OnceLock;

use sparselabel::bench::MatchConfig;
use sparselabel::grid::ImageGrid;
use sparselabel::ksvd::MiKsvdConfig;
use sparselabel::network::{train_network_dictionaries, Network, NetworkSpec, SamplingConfig};
use sparselabel::pipeline::{benchmark_predictions, compute_features, fit_transfer, predict_all, TransferSettings};
use sparselabel::synth::{corpus, SynthConfig};
use sparselabel::transfer::{feature_mask, TransferConfig, TransferModel};

struct Fixture {
    train_truths: Vec<ImageGrid>,
    test_truths: Vec<ImageGrid>,
    train: Vec<sparselabel::network::FeatureStack>,
    test: Vec<sparselabel::network::FeatureStack>,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(build_fixture)
}

fn build_fixture() -> Fixture {
    let cfg = SynthConfig {
        width: 48,
        height: 48,
        min_radius: 8.0,
        max_radius: 18.0,
        ..SynthConfig::default()
    };
    let data = corpus(3, 8, &cfg);
    let imgs: Vec<ImageGrid> = data.iter().map(|s| s.image.clone()).collect();
    let truths: Vec<ImageGrid> = data.iter().map(|s| s.boundaries.clone()).collect();
    let spec = NetworkSpec::from_json(
        r#"{"scales": [1.0], "channels": 1,
            "layer1": [{"name": "a", "side": 5, "atoms": 24, "sparsity": 2}],
            "concat": ["a"]}"#,
    )
    .unwrap();
    let dicts = train_network_dictionaries(
        &imgs[..6],
        &spec,
        &MiKsvdConfig {
            iterations: 4,
            seed: 2,
            ..Default::default()
        },
        &SamplingConfig {
            patches_per_dictionary: 3000,
            ..Default::default()
        },
    )
    .unwrap();
    let net = Network::new(spec, dicts).unwrap();
    let stacks = compute_features(&net, &imgs).unwrap();
    Fixture {
        train_truths: truths[..6].to_vec(),
        test_truths: truths[6..].to_vec(),
        train: stacks[..6].to_vec(),
        test: stacks[6..].to_vec(),
    }
}

fn settings() -> TransferSettings {
    TransferSettings {
        side: 5,
        samples: 3000,
        solver: TransferConfig {
            reg_strength: 0.1,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn learned_transfer_finds_held_out_boundaries() {
    let f = fixture();
    let model = fit_transfer(&f.train, &f.train_truths, &settings(), 9).unwrap();
    assert_eq!(model.channels(), 1);
    let preds = predict_all(&f.test, &model).unwrap();
    for p in &preds {
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let truths: Vec<Vec<ImageGrid>> = f.test_truths.iter().map(|t| vec![t.clone()]).collect();
    let learned = benchmark_predictions(&preds, &truths, &MatchConfig::default()).unwrap();
    // a flat map scores nothing; the learned one must do substantially better
    let flat: Vec<ImageGrid> = preds.iter().map(|p| ImageGrid::filled(p.width(), p.height(), 1, 0.5)).collect();
    let base = benchmark_predictions(&flat, &truths, &MatchConfig::default()).unwrap();
    assert!(learned.ods_f > 0.6, "ODS {}", learned.ods_f);
    assert!(learned.ods_f > base.ods_f + 0.3);
}

#[test]
fn fitting_is_seeded_and_masks_follow_their_seeds() {
    let f = fixture();
    let a = fit_transfer(&f.train, &f.train_truths, &settings(), 9).unwrap();
    let b = fit_transfer(&f.train, &f.train_truths, &settings(), 9).unwrap();
    assert_eq!(a, b);
    let c = fit_transfer(&f.train, &f.train_truths, &settings(), 10).unwrap();
    assert_ne!(a, c);
    let dim = a.feature_dim() - 1;
    for cl in a.classifiers() {
        let mask = feature_mask(cl.drop_seed, dim, a.drop_fraction());
        for (w, keep) in cl.weights.iter().zip(&mask) {
            if !keep {
                assert_eq!(*w, 0.0);
            }
        }
    }
    let mut buf = Vec::new();
    a.write_to(&mut buf).unwrap();
    let back = TransferModel::read_from(&buf[..]).unwrap();
    assert_eq!(predict_all(&f.test, &back).unwrap(), predict_all(&f.test, &a).unwrap());
}

#[test]
fn all_negative_truth_with_positive_balance_fails() {
    let f = fixture();
    let empty: Vec<ImageGrid> = f.train_truths.iter().map(|t| ImageGrid::zeros(t.width(), t.height(), 1)).collect();
    assert!(matches!(
        fit_transfer(&f.train, &empty, &settings(), 1),
        Err(sparselabel::Error::NoPositiveSamples)
    ));
    let uniform = TransferSettings {
        positive_fraction: None,
        ..settings()
    };
    let model = fit_transfer(&f.train, &empty, &uniform, 1).unwrap();
    let pred = predict_all(&f.test[..1], &model).unwrap();
    assert!(pred[0].data().iter().all(|&v| v < 0.05));
}
