//! On-disk artifacts: a dictionary set (output of `train-dicts`) and a
//! model bundle (dictionaries plus transfer model, output of
//! `train-transfer`). Both carry a provenance block.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparselabel::dict::Dictionary;
use sparselabel::network::{Network, NetworkSpec};
use sparselabel::transfer::TransferModel;

use crate::config::RunConfig;
use crate::error::{CliError, Context, Result};

pub const NETWORK_FILE: &str = "network.json";
pub const DICTIONARY_SET_FILE: &str = "dictionaries.json";
pub const BUNDLE_FILE: &str = "bundle.json";
pub const TRANSFER_FILE: &str = "transfer.sltm";

/// Environment variable naming a directory for cached Gram matrices.
pub const CACHE_ENV: &str = "SPARSELABEL_CACHE";

/// Where an artifact came from; enough to recompute its config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
}

impl Provenance {
    /// The worker count is not recorded: it never changes outputs.
    pub fn new(config: &RunConfig) -> Self {
        let config = RunConfig {
            workers: 0,
            ..config.clone()
        };
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_hash: config.hash(),
            config,
        }
    }

    pub fn verify(&self) -> Result<()> {
        let h = self.config.hash();
        if h != self.config_hash {
            return Err(CliError::Bundle(format!(
                "config hash mismatch: recorded {}, recomputed {h}",
                self.config_hash
            )));
        }
        if self.seed != self.config.seed {
            return Err(CliError::Bundle("provenance seed differs from its config".into()));
        }
        Ok(())
    }
}

/// Points every path of `spec` at `<name>.sldc`.
pub fn with_dictionary_files(spec: &NetworkSpec) -> NetworkSpec {
    let mut s = spec.clone();
    for p in &mut s.layer1 {
        p.dictionary = Some(format!("{}.sldc", p.name));
    }
    for p in &mut s.layer2 {
        p.dictionary = Some(format!("{}.sldc", p.name));
    }
    s
}

fn write_dictionaries(spec: &NetworkSpec, dicts: &BTreeMap<String, Dictionary>, dir: &Path) -> Result<()> {
    for name in spec.path_names() {
        let file = spec
            .dictionary_ref(name)
            .ok_or_else(|| CliError::Bundle(format!("path `{name}` names no dictionary file")))?;
        let d = dicts
            .get(name)
            .ok_or_else(|| CliError::Bundle(format!("no dictionary for path `{name}`")))?;
        let p = dir.join(file);
        d.save(&p).at(p)?;
    }
    Ok(())
}

fn read_dictionaries(spec: &NetworkSpec, dir: &Path) -> Result<BTreeMap<String, Dictionary>> {
    spec.path_names()
        .map(|name| {
            let file = spec
                .dictionary_ref(name)
                .ok_or_else(|| CliError::Bundle(format!("path `{name}` names no dictionary file")))?;
            let p = dir.join(file);
            Ok((name.to_string(), Dictionary::load(&p).at(p)?))
        })
        .collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).at(path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).at(path)
}

/// Builds a network, reusing Gram matrices from `$SPARSELABEL_CACHE` when
/// the variable is set.
pub fn build_network(spec: NetworkSpec, dicts: BTreeMap<String, Dictionary>) -> Result<Network> {
    Ok(match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => Network::with_gram_dir(spec, dicts, PathBuf::from(dir))?,
        _ => Network::new(spec, dicts)?,
    })
}

/// Trained dictionaries of every network path.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionarySet {
    pub spec: NetworkSpec,
    pub dictionaries: BTreeMap<String, Dictionary>,
    pub provenance: Provenance,
}

impl DictionarySet {
    /// Writes `network.json`, one `.sldc` file per path and the
    /// provenance record.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).at(dir)?;
        let spec = with_dictionary_files(&self.spec);
        write_dictionaries(&spec, &self.dictionaries, dir)?;
        write_json(&spec, &dir.join(NETWORK_FILE))?;
        write_json(&self.provenance, &dir.join(DICTIONARY_SET_FILE))?;
        let mut files: Vec<PathBuf> = spec
            .path_names()
            .map(|n| dir.join(spec.dictionary_ref(n).expect("set above")))
            .collect();
        files.push(dir.join(NETWORK_FILE));
        files.push(dir.join(DICTIONARY_SET_FILE));
        Ok(files)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: NetworkSpec = read_json(&dir.join(NETWORK_FILE))?;
        spec.validate()?;
        let provenance: Provenance = read_json(&dir.join(DICTIONARY_SET_FILE))?;
        provenance.verify()?;
        let dictionaries = read_dictionaries(&spec, dir)?;
        // shape check against the spec
        Network::new(spec.clone(), dictionaries.clone())?;
        Ok(Self {
            spec,
            dictionaries,
            provenance,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleDocument {
    network: NetworkSpec,
    transfer: String,
    provenance: Provenance,
}

/// Everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub spec: NetworkSpec,
    pub dictionaries: BTreeMap<String, Dictionary>,
    pub transfer: TransferModel,
    pub provenance: Provenance,
}

impl ModelBundle {
    /// Checks that the transfer model reads the network's features and
    /// that the provenance hash is consistent.
    pub fn verify(&self) -> Result<()> {
        self.provenance.verify()?;
        let dim = self.spec.validate()?;
        if self.transfer.feature_dim() != dim + 1 {
            return Err(CliError::Bundle(format!(
                "transfer model expects {} features, network produces {}",
                self.transfer.feature_dim() - 1,
                dim
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.verify()?;
        std::fs::create_dir_all(dir).at(dir)?;
        let spec = with_dictionary_files(&self.spec);
        write_dictionaries(&spec, &self.dictionaries, dir)?;
        let p = dir.join(TRANSFER_FILE);
        self.transfer.save(&p).at(p)?;
        let doc = BundleDocument {
            network: spec,
            transfer: TRANSFER_FILE.into(),
            provenance: self.provenance.clone(),
        };
        write_json(&doc, &dir.join(BUNDLE_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let doc: BundleDocument = read_json(&dir.join(BUNDLE_FILE))?;
        let dictionaries = read_dictionaries(&doc.network, dir)?;
        let p = dir.join(&doc.transfer);
        let transfer = TransferModel::load(&p).at(p)?;
        let b = Self {
            spec: doc.network,
            dictionaries,
            transfer,
            provenance: doc.provenance,
        };
        b.verify()?;
        Ok(b)
    }

    pub fn network(&self) -> Result<Network> {
        build_network(self.spec.clone(), self.dictionaries.clone())
    }

    /// SHA-256 over the bundle document and every file it references.
    pub fn content_hash(dir: &Path) -> Result<String> {
        let doc_path = dir.join(BUNDLE_FILE);
        let doc: BundleDocument = read_json(&doc_path)?;
        let mut files = vec![doc_path];
        files.extend(
            doc.network
                .path_names()
                .filter_map(|n| doc.network.dictionary_ref(n))
                .map(|f| dir.join(f)),
        );
        files.push(dir.join(&doc.transfer));
        let mut h = Sha256::new();
        for f in files {
            h.update(std::fs::read(&f).at(&f)?);
        }
        Ok(format!("{:x}", h.finalize()))
    }
}
