//! Whole-experiment configuration. One file (TOML primary, JSON
//! alternate) wires the data source, network, loss weights, training
//! schedule and evaluation settings; unknown keys are rejected and the
//! original file is echoed verbatim into the run's output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::{self, SyntheticConfig};
use crate::data::{manifest, preprocess, storage, DomainRegistry};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::EvalConfig;
use crate::network::NetworkConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generate the multi-domain dataset in memory.
    Synthetic,
    /// Load a directory of per-domain sidecar + raw-slab files.
    Registry,
    /// Load medical volumes listed in a JSON manifest of NIfTI paths.
    Manifest,
}

/// Resampling/normalization applied to manifest volumes before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// In-plane size every slice is resized to.
    pub target_size: usize,
    /// Z-score each volume over its nonzero voxels.
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { target_size: 384, normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Registry root or manifest file; required for those sources.
    pub path: Option<PathBuf>,
    /// Generation seed for the synthetic source.
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    /// Applied to manifest volumes only; registry/synthetic data is
    /// stored ready to train on.
    pub preprocess: PreprocessConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            seed: 0,
            synthetic: SyntheticConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self.source {
            DataSource::Synthetic => {}
            DataSource::Registry | DataSource::Manifest => {
                if self.path.is_none() {
                    return Err(Error::Config(format!(
                        "data source {:?} needs data.path",
                        self.source
                    )));
                }
            }
        }
        if self.preprocess.target_size == 0 || self.preprocess.target_size % 16 != 0 {
            return Err(Error::Config(format!(
                "preprocess.target_size {} must be a positive multiple of 16",
                self.preprocess.target_size
            )));
        }
        Ok(())
    }

    /// Materialize the dataset this config describes.
    pub fn load(&self) -> Result<DomainRegistry> {
        self.validate()?;
        match self.source {
            DataSource::Synthetic => synthetic::generate_registry(&self.synthetic, self.seed),
            DataSource::Registry => storage::load_registry(self.path.as_ref().unwrap()),
            DataSource::Manifest => {
                let path = self.path.as_ref().unwrap();
                let m = manifest::read_manifest(path)?;
                let root = path.parent().unwrap_or_else(|| Path::new("."));
                let mut reg = manifest::load_multisite_volumes(root, &m)?;
                for d in &mut reg.domains {
                    for v in &mut d.volumes {
                        *v = preprocess::preprocess_volume(
                            v,
                            self.preprocess.target_size,
                            self.preprocess.normalize,
                        )?;
                    }
                }
                reg.validate()?;
                Ok(reg)
            }
        }
    }

    /// In-plane size the training samples will have, when knowable
    /// without touching the filesystem.
    pub fn expected_input_size(&self) -> Option<usize> {
        match self.source {
            DataSource::Synthetic => Some(self.synthetic.size),
            DataSource::Manifest => Some(self.preprocess.target_size),
            DataSource::Registry => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; when set it overrides `data.seed` and `train.seed`, so
    /// one knob reproduces a whole experiment.
    pub seed: Option<u64>,
    /// Default output directory (the command line's `--out` wins).
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Push the root seed (if any) down into the per-stage seeds.
    pub fn apply_root_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.network.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.network.in_channels != 3 {
            return Err(Error::Config(format!(
                "network.in_channels {} must be 3 (slice triples)",
                self.network.in_channels
            )));
        }
        if self.eval.input_size == 0 || self.eval.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "eval.input_size {} must be a positive multiple of 16",
                self.eval.input_size
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        if let Some(size) = self.data.expected_input_size() {
            if size != self.eval.input_size {
                return Err(Error::Config(format!(
                    "eval.input_size {} does not match the {}-pixel training slices",
                    self.eval.input_size, size
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("TOML config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("JSON config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load by extension: `.toml` or `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text),
            Some("json") => Self::from_json_str(&text),
            other => Err(Error::Config(format!(
                "{}: unsupported config extension {:?} (want .toml or .json)",
                path.display(),
                other.unwrap_or("<none>")
            ))),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("TOML encode: {e}")))
    }
}

/// Copy the raw config bytes into `out_dir` (as `config_echo.<ext>`) and
/// write the fully resolved settings as `config_resolved.toml`, so every
/// run records both exactly what was asked for and what was used.
pub fn echo_config(cfg: &ExperimentConfig, source: Option<&Path>, out_dir: &Path) -> Result<()> {
    if let Some(src) = source {
        let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("toml");
        let dst = out_dir.join(format!("config_echo.{ext}"));
        std::fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
    }
    let resolved = out_dir.join("config_resolved.toml");
    std::fs::write(&resolved, cfg.to_toml_string()?).map_err(|e| Error::io(&resolved, e))
}
