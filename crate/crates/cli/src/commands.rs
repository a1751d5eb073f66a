//! The subcommands as library functions; `main` only parses flags.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sparselabel::bench::{evaluate_boundaries, evaluate_segmentation, nms_thin, MatchConfig, PRCurve, SegmentationReport};
use sparselabel::dict::{atom_mosaic, Dictionary};
use sparselabel::grid::ImageGrid;
use sparselabel::io::{save_channels_png, save_png, save_raw};
use sparselabel::network::{train_network_dictionaries, Network};
use sparselabel::pipeline::{benchmark_predictions, fit_transfer};
use sparselabel::transfer::predict_labeling;

use crate::bundle::{build_network, with_dictionary_files, DictionarySet, ModelBundle, Provenance, BUNDLE_FILE, NETWORK_FILE};
use crate::config::RunConfig;
use crate::error::{CliError, Context, Result};
use crate::manifest::{load_image_as, mean_truth, Entry, Manifest, Split};
use crate::plot::pr_plot;

/// Runs `f` on a pool of `workers` threads (0 picks the default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

fn load_split_images(entries: &[&Entry], channels: usize) -> Result<Vec<ImageGrid>> {
    entries.par_iter().map(|e| load_image_as(&e.image, channels)).collect()
}

fn forward_all(net: &Network, images: &[ImageGrid]) -> Result<Vec<sparselabel::network::FeatureStack>> {
    Ok(images
        .par_iter()
        .map(|img| net.forward(img))
        .collect::<sparselabel::Result<_>>()?)
}

/// Trains every dictionary of the configured network on the training
/// split and writes the dictionary set to `out`.
pub fn train_dicts(manifest: &Manifest, cfg: &RunConfig, out: &Path) -> Result<DictionarySet> {
    let train = manifest.split(Split::Train);
    if train.is_empty() {
        return Err(CliError::EmptyTrainingSplit);
    }
    let spec = cfg.network_spec()?.clone();
    let images = load_split_images(&train, spec.channels)?;
    let mut resolved = cfg.clone();
    resolved.dictionary = cfg.dictionary_config();
    let dictionaries = train_network_dictionaries(&images, &spec, &resolved.dictionary, &cfg.sampling)?;
    let set = DictionarySet {
        spec: with_dictionary_files(&spec),
        dictionaries,
        provenance: Provenance::new(&resolved),
    };
    set.save(out)?;
    Ok(set)
}

/// Fits the transfer model on the training split using the dictionary
/// set in `dicts` and writes a complete bundle to `out`. The network and
/// dictionary settings recorded in the bundle are those the dictionaries
/// were trained with.
pub fn train_transfer(manifest: &Manifest, dicts: &Path, cfg: &RunConfig, out: &Path) -> Result<ModelBundle> {
    let train = manifest.split(Split::Train);
    if train.is_empty() {
        return Err(CliError::EmptyTrainingSplit);
    }
    let set = DictionarySet::load(dicts)?;
    let mut resolved = cfg.clone();
    let stage = &set.provenance.config;
    if (&resolved.network, &resolved.dictionary, &resolved.sampling) != (&stage.network, &stage.dictionary, &stage.sampling) {
        log::info!("using the network and dictionary settings recorded in {}", dicts.display());
    }
    resolved.network = stage.network.clone();
    resolved.dictionary = stage.dictionary.clone();
    resolved.sampling = stage.sampling;

    let images = load_split_images(&train, set.spec.channels)?;
    let truths: Vec<ImageGrid> = train
        .par_iter()
        .zip(&images)
        .map(|(e, img)| mean_truth(&manifest.load_truths(e, img.width(), img.height())?))
        .collect::<Result<_>>()?;
    let net = build_network(set.spec.clone(), set.dictionaries.clone())?;
    let stacks = forward_all(&net, &images)?;
    let transfer = fit_transfer(&stacks, &truths, &resolved.transfer, resolved.transfer_seed())?;
    let bundle = ModelBundle {
        spec: set.spec,
        dictionaries: set.dictionaries,
        transfer,
        provenance: Provenance::new(&resolved),
    };
    bundle.save(out)?;
    Ok(bundle)
}

/// Files written for one input image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferOutput {
    pub image: PathBuf,
    /// One PNG per label channel.
    pub maps: Vec<PathBuf>,
    /// All channels as 32-bit floats.
    pub raw: PathBuf,
    /// Thinned contours, for single-channel models.
    pub thinned: Option<PathBuf>,
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Manifest(format!("{} has no usable file name", path.display())))
}

fn unique_stems<'a>(paths: impl Iterator<Item = &'a PathBuf>) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    paths
        .map(|p| {
            let s = stem(p)?;
            if !seen.insert(s.clone()) {
                return Err(CliError::Manifest(format!("two inputs share the file name `{s}`")));
            }
            Ok(s)
        })
        .collect()
}

/// Label maps of every image under `out`: `<stem>.png` (or one
/// `<stem>_<c>.png` per channel), `<stem>.raw`, and `<stem>_thin.png` for
/// single-channel models.
pub fn infer(bundle: &ModelBundle, images: &[PathBuf], out: &Path) -> Result<Vec<InferOutput>> {
    let stems = unique_stems(images.iter())?;
    std::fs::create_dir_all(out).at(out)?;
    let net = bundle.network()?;
    images
        .par_iter()
        .zip(&stems)
        .map(|(path, stem)| {
            let img = load_image_as(path, bundle.spec.channels)?;
            let pred = predict_labeling(&net.forward(&img).at(path)?, &bundle.transfer)?;
            let base = out.join(stem);
            let maps = save_channels_png(&pred, &base)?;
            let raw = base.with_extension("raw");
            save_raw(&pred, &raw)?;
            let thinned = if pred.channels() == 1 {
                let p = out.join(format!("{stem}_thin.png"));
                save_png(&nms_thin(&pred)?, &p)?;
                Some(p)
            } else {
                None
            };
            Ok(InferOutput {
                image: path.clone(),
                maps,
                raw,
                thinned,
            })
        })
        .collect()
}

/// What to score.
#[derive(Debug, Clone, Copy)]
pub enum Detections<'a> {
    /// Run a bundle on the test images (boundary maps are thinned first).
    Bundle(&'a ModelBundle),
    /// Precomputed single-channel maps named `<image stem>.png`, scored
    /// as given.
    Directory(&'a Path),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkReport {
    Boundaries(PRCurve),
    Segmentation(SegmentationReport),
}

/// Scores the test split and writes `pr.csv`, `pr.json` and `pr.png`
/// (boundaries) or `segmentation.json` (multi-channel labels) to `out`.
pub fn benchmark(manifest: &Manifest, detections: Detections, cfg: &MatchConfig, out: &Path) -> Result<BenchmarkReport> {
    let test = manifest.split(Split::Test);
    if test.is_empty() {
        return Err(CliError::EmptyTestSplit);
    }
    let stems = unique_stems(test.iter().map(|e| &e.image))?;
    let (preds, thin) = match detections {
        Detections::Bundle(bundle) => {
            let images = load_split_images(&test, bundle.spec.channels)?;
            let net = bundle.network()?;
            let stacks = forward_all(&net, &images)?;
            let preds: Vec<ImageGrid> = stacks
                .par_iter()
                .map(|s| predict_labeling(s, &bundle.transfer))
                .collect::<sparselabel::Result<_>>()?;
            (preds, true)
        }
        Detections::Directory(dir) => {
            let preds = stems
                .iter()
                .map(|s| {
                    let p = dir.join(format!("{s}.png"));
                    Ok(load_image_as(&p, 1)?)
                })
                .collect::<Result<_>>()?;
            (preds, false)
        }
    };
    let truths: Vec<Vec<ImageGrid>> = test
        .iter()
        .zip(&preds)
        .map(|(e, p)| manifest.load_truths(e, p.width(), p.height()))
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out).at(out)?;

    let channels = preds[0].channels();
    if channels == 1 {
        let curve = if thin {
            benchmark_predictions(&preds, &truths, cfg)?
        } else {
            let items: Vec<(ImageGrid, Vec<ImageGrid>)> = preds.into_iter().zip(truths).collect();
            evaluate_boundaries(&items, cfg)?
        };
        std::fs::write(out.join("pr.csv"), curve.to_csv())?;
        std::fs::write(out.join("pr.json"), serde_json::to_string_pretty(&curve)? + "\n")?;
        save_png(&pr_plot(&curve), out.join("pr.png"))?;
        Ok(BenchmarkReport::Boundaries(curve))
    } else {
        let mut confusion = vec![vec![0u64; channels]; channels];
        for (p, t) in preds.iter().zip(&truths) {
            let r = evaluate_segmentation(p, &mean_truth(t)?)?;
            for (row, add) in confusion.iter_mut().zip(&r.confusion) {
                for (a, b) in row.iter_mut().zip(add) {
                    *a += b;
                }
            }
        }
        let report = SegmentationReport::from_confusion(confusion);
        std::fs::write(out.join("segmentation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(BenchmarkReport::Segmentation(report))
    }
}

fn describe_dictionary(s: &mut String, name: &str, d: &Dictionary) {
    let g = d.geometry();
    let _ = writeln!(
        s,
        "  {name}: {} atoms of {}x{}x{}, sparsity {}, zero-mean input {}, fingerprint {:016x}",
        d.atom_count(),
        g.side(),
        g.side(),
        g.channels(),
        d.sparsity(),
        d.zero_mean_input(),
        d.fingerprint()
    );
}

fn write_mosaic(out: Option<&Path>, name: &str, d: &Dictionary) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).at(dir)?;
        let p = dir.join(format!("{name}_atoms.png"));
        save_png(&atom_mosaic(d), &p).at(p)?;
    }
    Ok(())
}

/// Describes a bundle, a dictionary set or a single `.sldc` file and,
/// when `out` is given, writes an atom mosaic per dictionary there.
pub fn inspect(target: &Path, out: Option<&Path>) -> Result<String> {
    let mut s = String::new();
    if target.is_file() {
        let d = Dictionary::load(target).at(target)?;
        let name = stem(&target.to_path_buf())?;
        describe_dictionary(&mut s, &name, &d);
        write_mosaic(out, &name, &d)?;
        return Ok(s);
    }
    let (spec, dicts, provenance) = if target.join(BUNDLE_FILE).is_file() {
        let b = ModelBundle::load(target)?;
        let k = b.transfer.kernel();
        let _ = writeln!(s, "bundle {}", target.display());
        let _ = writeln!(s, "content hash {}", ModelBundle::content_hash(target)?);
        let _ = writeln!(
            s,
            "transfer: {} label channels, {}x{} patches, {} averaging positions, {} features",
            b.transfer.channels(),
            k.side(),
            k.side(),
            k.len(),
            b.transfer.feature_dim() - 1
        );
        (b.spec, b.dictionaries, b.provenance)
    } else if target.join(NETWORK_FILE).is_file() {
        let set = DictionarySet::load(target)?;
        let _ = writeln!(s, "dictionary set {}", target.display());
        (set.spec, set.dictionaries, set.provenance)
    } else {
        return Err(CliError::Bundle(format!(
            "{} is neither a bundle, a dictionary set nor a dictionary file",
            target.display()
        )));
    };
    let _ = writeln!(
        s,
        "seed {}, config hash {}, tool version {}",
        provenance.seed, provenance.config_hash, provenance.tool_version
    );
    let _ = writeln!(s, "network: {} scales, {} features per pixel", spec.scales.len(), spec.validate()?);
    for (name, d) in &dicts {
        describe_dictionary(&mut s, name, d);
        write_mosaic(out, name, d)?;
    }
    Ok(s)
}

