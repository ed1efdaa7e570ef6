use std::fs;
use std::path::{Path, PathBuf};

use gridvit::data::FusionMode;
use gridvit::model::ModelConfig;
use gridvit::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError};

/// Everything a run needs, loaded from one JSON file. Relative paths resolve
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model hyperparameters; omitted means the gridvit-tiny defaults, or
    /// the checkpoint's own config when one is loaded.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub fusion: FusionMode,
    pub folds: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            train: TrainConfig::default(),
            manifest: None,
            output_dir: PathBuf::from("."),
            fusion: FusionMode::Early,
            folds: 10,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &cfg.manifest {
            cfg.manifest = Some(base.join(m));
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    /// Model config with the run's fusion mode applied.
    pub fn model_config(&self) -> ModelConfig {
        self.model
            .clone()
            .unwrap_or_default()
            .with_fusion(self.fusion)
    }

    /// Training config carrying the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// The manifest path, checked to exist.
    pub fn manifest(&self) -> Result<&Path, CliError> {
        let m = self.manifest.as_deref().ok_or_else(|| {
            CliError::Config("config key `manifest` is missing (set it or pass --manifest)".into())
        })?;
        if !m.is_file() {
            return Err(CliError::Config(format!(
                "config key `manifest`: {} does not exist",
                m.display()
            )));
        }
        Ok(m)
    }
}
