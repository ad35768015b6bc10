//! Run configuration files and run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use protodebug::datagen::DatasetSpec;
use protodebug::dataset::sha256_hex;
use protodebug::debugger::{OracleAnnotator, SessionConfig};
use protodebug::model::ModelConfig;
use protodebug::training::{Stage2Config, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("cannot parse {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything a command may need. Missing sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Refit the aggregation weights after stage one.
    pub stage2: Option<Stage2Config>,
    pub session: SessionConfig,
    pub oracle: OracleAnnotator,
}

impl RunConfig {
    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, String> {
        if json {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        }
    }

    /// Checks the sections against each other and against the dataset they
    /// will run on.
    pub fn validate(&self, spec: &DatasetSpec) -> Result<(), ConfigError> {
        let invalid = |e: protodebug::Error| ConfigError::Invalid(e.to_string());
        spec.validate().map_err(invalid)?;
        self.model.validate().map_err(invalid)?;
        if self.model.num_classes != spec.num_classes {
            return Err(ConfigError::Invalid(format!(
                "model has {} classes, data has {}",
                self.model.num_classes, spec.num_classes
            )));
        }
        if self.model.input_shape != [spec.height, spec.width, spec.channels] {
            return Err(ConfigError::Invalid(format!(
                "model input {:?} does not match {}x{}x{} images",
                self.model.input_shape, spec.height, spec.width, spec.channels
            )));
        }
        let n: usize = spec.train_per_class.iter().sum();
        self.train.validate(n).map_err(invalid)?;
        self.session.finetune.validate(n).map_err(invalid)?;
        if self.session.top_a == 0 {
            return Err(ConfigError::Invalid(
                "session.top_a must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.oracle.overlap_threshold) {
            return Err(ConfigError::Invalid(
                "oracle.overlap_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

pub fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        let data = std::fs::read(path)?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

/// Written as `run_manifest.json` next to a command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub config: RunConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

impl RunManifest {
    pub const FILE: &'static str = "run_manifest.json";

    pub fn start(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs.push(Artifact::of(path)?);
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        self.finished_unix_ms = unix_ms();
        let path = dir.join(Self::FILE);
        std::fs::write(
            &path,
            serde_json::to_vec_pretty(&self).map_err(std::io::Error::other)?,
        )?;
        Ok(path)
    }
}
