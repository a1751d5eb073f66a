//! Dataset manifests: a JSON list of images with optional truth files and
//! a train/test split tag.
//!
//! ```json
//! {
//!   "root": "data",
//!   "truth_format": {"kind": "mask"},
//!   "entries": [
//!     {"image": "a.png", "truth": ["a_1.png", "a_2.png"], "split": "train"},
//!     {"image": "b.png", "truth": "b.png", "split": "test"}
//!   ]
//! }
//! ```
//!
//! `root` is relative to the manifest file and defaults to its directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparselabel::grid::ImageGrid;
use sparselabel::io::{load_image, load_mask, load_paletted_labels};

use crate::error::{CliError, Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How truth files encode labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TruthFormat {
    /// One binary channel: a pixel is positive when any channel is above
    /// one half.
    #[default]
    Mask,
    /// Paletted PNG, one-hot over palette indices below `classes`.
    Paletted { classes: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    image: PathBuf,
    truth: Option<OneOrMany>,
    split: Split,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    root: Option<PathBuf>,
    #[serde(default)]
    truth_format: TruthFormat,
    entries: Vec<RawEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub image: PathBuf,
    /// Human annotations; several boundary maps per image are allowed.
    pub truths: Vec<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub truth_format: TruthFormat,
    pub entries: Vec<Entry>,
}

impl Manifest {
    /// Parses and checks a manifest: every file exists and no image is in
    /// both splits.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).at(path)?;
        let raw: RawManifest = serde_json::from_str(&text).at(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let root = raw.root.map_or(dir.clone(), |r| dir.join(r));
        let entries = raw
            .entries
            .into_iter()
            .map(|e| Entry {
                image: root.join(e.image),
                truths: match e.truth {
                    None => Vec::new(),
                    Some(OneOrMany::One(p)) => vec![root.join(p)],
                    Some(OneOrMany::Many(v)) => v.into_iter().map(|p| root.join(p)).collect(),
                },
                split: e.split,
            })
            .collect();
        let m = Self {
            root,
            truth_format: raw.truth_format,
            entries,
        };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let mut seen = [BTreeSet::new(), BTreeSet::new()];
        for e in &self.entries {
            for p in std::iter::once(&e.image).chain(&e.truths) {
                if !p.is_file() {
                    return Err(CliError::Manifest(format!("missing file {}", p.display())));
                }
            }
            let key = std::fs::canonicalize(&e.image)?;
            seen[e.split as usize].insert(key);
        }
        if let Some(p) = seen[0].intersection(&seen[1]).next() {
            return Err(CliError::Manifest(format!("{} is in both splits", p.display())));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Every truth map of `entry`, each checked against the image size.
    pub fn load_truths(&self, entry: &Entry, width: usize, height: usize) -> Result<Vec<ImageGrid>> {
        if entry.truths.is_empty() {
            return Err(CliError::Manifest(format!("{} has no truth", entry.image.display())));
        }
        entry
            .truths
            .iter()
            .map(|p| {
                let t = match self.truth_format {
                    TruthFormat::Mask => load_mask(p),
                    TruthFormat::Paletted { classes } => load_paletted_labels(p, classes),
                }
                .at(p)?;
                if (t.width(), t.height()) != (width, height) {
                    return Err(CliError::Manifest(format!(
                        "{} is {}x{}, its image {width}x{height}",
                        p.display(),
                        t.width(),
                        t.height()
                    )));
                }
                Ok(t)
            })
            .collect()
    }
}

/// Mean of several annotations of one image: the fraction of annotators
/// marking each pixel, used as a soft training target.
pub fn mean_truth(truths: &[ImageGrid]) -> Result<ImageGrid> {
    let first = truths
        .first()
        .ok_or_else(|| CliError::Manifest("no truth maps".into()))?;
    if truths.iter().any(|t| !t.same_shape(first)) {
        return Err(CliError::Manifest("truth maps of one image differ in shape".into()));
    }
    let n = truths.len() as f64;
    Ok(ImageGrid::from_fn(first.width(), first.height(), first.channels(), |x, y, c| {
        truths.iter().map(|t| t.get(x, y, c)).sum::<f64>() / n
    }))
}

/// Loads an image with the channel count a network expects: color is
/// averaged to gray, gray is replicated to color.
pub fn load_image_as(path: &Path, channels: usize) -> Result<ImageGrid> {
    let img = load_image(path).at(path)?;
    conform_channels(&img, channels)
}

pub fn conform_channels(img: &ImageGrid, channels: usize) -> Result<ImageGrid> {
    let c = img.channels();
    Ok(match (c, channels) {
        _ if c == channels => img.clone(),
        (_, 1) => ImageGrid::from_fn(img.width(), img.height(), 1, |x, y, _| {
            img.pixel(x, y).iter().sum::<f64>() / c as f64
        }),
        (1, n) => ImageGrid::from_fn(img.width(), img.height(), n, |x, y, _| img.get(x, y, 0)),
        _ => {
            return Err(CliError::Manifest(format!(
                "cannot convert a {c}-channel image to {channels} channels"
            )))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparselabel::io::save_png;

    fn write_png(dir: &Path, name: &str) {
        save_png(&ImageGrid::from_fn(4, 3, 1, |x, _, _| x as f64 / 3.0), dir.join(name)).unwrap();
    }

    #[test]
    fn loads_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("d")).unwrap();
        for n in ["d/a.png", "d/a_t.png", "d/b.png"] {
            write_png(dir.path(), n);
        }
        let p = dir.path().join("m.json");
        std::fs::write(
            &p,
            r#"{"root": "d", "entries": [
                {"image": "a.png", "truth": "a_t.png", "split": "train"},
                {"image": "b.png", "split": "test"}]}"#,
        )
        .unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.split(Split::Train).len(), 1);
        assert_eq!(m.entries[0].truths, vec![dir.path().join("d/a_t.png")]);
        let t = m.load_truths(&m.entries[0], 4, 3).unwrap();
        assert_eq!(t[0].get(3, 0, 0), 1.0);
        assert_eq!(t[0].get(0, 0, 0), 0.0);
        assert!(m.load_truths(&m.entries[0], 5, 3).is_err());
        assert!(m.load_truths(&m.entries[1], 4, 3).is_err());
    }

    #[test]
    fn rejects_missing_files_and_shared_images() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"entries": [{"image": "nope.png", "split": "train"}]}"#).unwrap();
        assert!(Manifest::load(&p).unwrap_err().to_string().contains("nope.png"));
        std::fs::write(
            &p,
            r#"{"entries": [{"image": "a.png", "split": "train"}, {"image": "./a.png", "split": "test"}]}"#,
        )
        .unwrap();
        assert!(Manifest::load(&p).unwrap_err().to_string().contains("both splits"));
        std::fs::write(&p, r#"{"entries": [{"image": "a.png", "split": "val"}]}"#).unwrap();
        assert!(Manifest::load(&p).is_err());
    }

    #[test]
    fn annotations_average_and_channels_conform() {
        let a = ImageGrid::from_vec(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let b = ImageGrid::from_vec(2, 1, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(mean_truth(&[a, b]).unwrap().data(), &[1.0, 0.5]);
        let rgb = ImageGrid::from_vec(1, 1, 3, vec![0.0, 0.3, 0.6]).unwrap();
        assert!((conform_channels(&rgb, 1).unwrap().get(0, 0, 0) - 0.3).abs() < 1e-15);
        let gray = ImageGrid::from_vec(1, 1, 1, vec![0.2]).unwrap();
        assert_eq!(conform_channels(&gray, 3).unwrap().data(), &[0.2, 0.2, 0.2]);
        assert!(conform_channels(&ImageGrid::zeros(1, 1, 2), 3).is_err());
    }
}
