//! Run configuration: one JSON document, every field optional, with
//! command-line flags taking precedence.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparselabel::bench::MatchConfig;
use sparselabel::ksvd::MiKsvdConfig;
use sparselabel::network::{NetworkSpec, SamplingConfig};
use sparselabel::pipeline::TransferSettings;
use sparselabel::seed::derive_seed;

use crate::error::{CliError, Context, Result};

/// A bundled architecture by name (`multiscale`, `compact`), a path to a spec
/// file relative to the config file, or an inline spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    Named(String),
    Inline(NetworkSpec),
}

impl Default for NetworkSource {
    fn default() -> Self {
        Self::Named("multiscale".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed every random stream is derived from.
    pub seed: u64,
    /// Worker threads; 0 uses every core. Never affects results.
    pub workers: usize,
    pub network: NetworkSource,
    /// Dictionary training; a zero `seed` is derived from the root seed.
    pub dictionary: MiKsvdConfig,
    pub sampling: SamplingConfig,
    /// Transfer training; a zero `solver.drop_seed` is derived from the
    /// root seed.
    pub transfer: TransferSettings,
    pub benchmark: MatchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            network: NetworkSource::default(),
            dictionary: MiKsvdConfig::default(),
            sampling: SamplingConfig::default(),
            transfer: TransferSettings::default(),
            benchmark: MatchConfig::default(),
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies `overrides` and
    /// resolves the network to an inline spec.
    pub fn load(path: Option<&Path>, overrides: Overrides) -> Result<Self> {
        let (mut cfg, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).at(p)?;
                let cfg: Self = serde_json::from_str(&text).at(p)?;
                (cfg, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (Self::default(), Default::default()),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(w) = overrides.workers {
            cfg.workers = w;
        }
        cfg.network = NetworkSource::Inline(cfg.resolve_network(&base)?);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_network(&self, base: &Path) -> Result<NetworkSpec> {
        match &self.network {
            NetworkSource::Inline(spec) => {
                spec.validate()?;
                Ok(spec.clone())
            }
            NetworkSource::Named(name) => match name.as_str() {
                "multiscale" => Ok(NetworkSpec::multiscale()),
                "compact" => Ok(NetworkSpec::compact()),
                file => {
                    let p = base.join(file);
                    NetworkSpec::load(&p).at(p)
                }
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dictionary.validate()?;
        self.benchmark.validate()?;
        if self.sampling.patches_per_dictionary == 0 {
            return Err(CliError::Config("sampling.patches_per_dictionary must be positive".into()));
        }
        if self.transfer.side % 2 == 0 || self.transfer.samples == 0 {
            return Err(CliError::Config("transfer.side must be odd and transfer.samples positive".into()));
        }
        Ok(())
    }

    /// The network spec; only valid after [`RunConfig::load`].
    pub fn network_spec(&self) -> Result<&NetworkSpec> {
        match &self.network {
            NetworkSource::Inline(spec) => Ok(spec),
            NetworkSource::Named(n) => Err(CliError::Config(format!("network `{n}` is not resolved"))),
        }
    }

    /// Dictionary training settings with the seed filled in.
    pub fn dictionary_config(&self) -> MiKsvdConfig {
        let mut c = self.dictionary.clone();
        if c.seed == 0 {
            c.seed = derive_seed(self.seed, "dictionaries");
        }
        c
    }

    /// Seed handed to transfer fitting.
    pub fn transfer_seed(&self) -> u64 {
        derive_seed(self.seed, "transfer")
    }

    /// SHA-256 of the canonical JSON of everything that affects outputs
    /// (the worker count does not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_workers_do_not_change_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 4, "network": "compact", "transfer": {"side": 11}}"#).unwrap();
        let a = RunConfig::load(Some(&p), Overrides::default()).unwrap();
        assert_eq!(a.seed, 4);
        assert_eq!(a.transfer.side, 11);
        assert_eq!(a.network_spec().unwrap(), &NetworkSpec::compact());
        let b = RunConfig::load(Some(&p), Overrides { seed: Some(5), workers: Some(3) }).unwrap();
        assert_eq!(b.seed, 5);
        assert_ne!(a.hash(), b.hash());
        let c = RunConfig::load(Some(&p), Overrides { seed: None, workers: Some(3) }).unwrap();
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sed": 4}"#).unwrap();
        assert!(RunConfig::load(Some(&p), Overrides::default()).is_err());
        std::fs::write(&p, r#"{"transfer": {"side": 10}}"#).unwrap();
        assert!(RunConfig::load(Some(&p), Overrides::default()).is_err());
        std::fs::write(&p, r#"{"network": "missing.json"}"#).unwrap();
        let err = RunConfig::load(Some(&p), Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("missing.json"));
    }

    #[test]
    fn network_file_resolves_next_to_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("net.json"), NetworkSpec::compact().to_json().unwrap()).unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"network": "net.json"}"#).unwrap();
        let c = RunConfig::load(Some(&p), Overrides::default()).unwrap();
        assert_eq!(c.network_spec().unwrap(), &NetworkSpec::compact());
        // a resolved config reproduces its hash after a JSON round trip
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back.hash(), c.hash());
    }
}
