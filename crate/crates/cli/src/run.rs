use std::fs;
use std::path::{Path, PathBuf};

use sca_core::dpmix::MixtureState;
use sca_core::survmodel::SurvivalModel;
use sca_core::trainer::{GridCandidate, TrainConfig};
use sca_core::ScaError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CHECKPOINT_VERSION: u32 = 1;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RECORD_FILE: &str = "train_record.csv";
pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn metrics_file(split: &str) -> String {
    format!("metrics_{split}.json")
}

/// Trained parameters plus the mixture they were fitted with.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: SurvivalModel,
    pub mixture: MixtureState,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub data_path: String,
    pub schema_path: String,
    /// sha256 of the data file followed by the schema file.
    pub data_sha256: String,
    pub gamma0: f64,
    pub grid: Option<Vec<GridCandidate>>,
    pub checkpoint: String,
    pub train_record: String,
    pub dataset: String,
    pub metrics: String,
}

pub fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    let config = match path {
        None => TrainConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
    };
    Ok(config)
}

pub fn fingerprint(paths: &[&Path]) -> CliResult<String> {
    let mut hasher = Sha256::new();
    for p in paths {
        hasher.update(fs::read(p).map_err(ScaError::from)?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(ScaError::from)?;
    text.push('\n');
    fs::write(path, text).map_err(ScaError::from)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Run(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(ScaError::from)?)
}

/// A completed run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> CliResult<Self> {
        for f in [CHECKPOINT_FILE, MANIFEST_FILE, DATASET_FILE] {
            if !root.join(f).is_file() {
                return Err(CliError::Run(format!("{} is missing {f}", root.display())));
            }
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn checkpoint(&self) -> CliResult<Checkpoint> {
        let ck: Checkpoint = read_json(&self.root.join(CHECKPOINT_FILE))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CliError::Run(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.mixture.validate()?;
        Ok(ck)
    }

    pub fn manifest(&self) -> CliResult<RunManifest> {
        read_json(&self.root.join(MANIFEST_FILE))
    }

    pub fn dataset(&self) -> CliResult<sca_core::data::Dataset> {
        Ok(sca_core::data::Dataset::load_json(&self.root.join(DATASET_FILE))?)
    }
}
