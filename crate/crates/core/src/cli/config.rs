use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::Protocol;
use crate::training::{AblationVariant, Hyperparams};

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_protocols() -> Vec<Protocol> {
    vec![Protocol::Gzsl, Protocol::Zsl]
}

fn one() -> usize {
    1
}

/// Contents of a run configuration file. See `docs/config.md`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Generate the dataset in memory instead of loading it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub variant: AblationVariant,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<Protocol>,
    /// Cut-offs for hit@k on unseen classes; empty disables it.
    #[serde(default)]
    pub hit_at_k: Vec<usize>,
    #[serde(default)]
    pub export_prototypes: bool,
    /// Evaluate every this many epochs during training; 0 disables it.
    #[serde(default)]
    pub eval_every: usize,
    /// Variants for `ablate`; empty means all of them.
    #[serde(default)]
    pub variants: Vec<AblationVariant>,
    /// Number of seeds for `ablate` and `sweep`, counting up from the
    /// configured seed.
    #[serde(default = "one")]
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        if self.protocols.is_empty() {
            return Err(Error::Config("no evaluation protocol requested".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        Ok(())
    }

    /// Loads or generates the dataset; exactly one source must be set.
    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.dataset, &self.synthetic) {
            (Some(dir), None) => load_dataset(dir),
            (None, Some(spec)) => generate_synthetic(spec),
            (Some(_), Some(_)) => Err(Error::Config(
                "config sets both `dataset` and `synthetic`; choose one".into(),
            )),
            (None, None) => Err(Error::Config(
                "config sets neither `dataset` nor `synthetic`".into(),
            )),
        }
    }

    /// Creates the output directory.
    pub fn prepare_output(&self) -> Result<&Path> {
        let dir = self.output_dir.as_path();
        fs::create_dir_all(dir).map_err(|e| {
            Error::Config(format!("output_dir {} is not writable: {e}", dir.display()))
        })?;
        Ok(dir)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
}

/// Writes `run.json` into the output directory.
pub fn write_provenance(cfg: &RunConfig, command: &str, dir: &Path) -> Result<()> {
    let record = Provenance {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.hyperparams.seed,
        config_hash: cfg.hash(),
        config: cfg,
    };
    let path = dir.join("run.json");
    let text = serde_json::to_string_pretty(&record)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}
