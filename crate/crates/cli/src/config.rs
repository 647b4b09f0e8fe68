use std::fs;
use std::path::{Path, PathBuf};

use gimtp_core::data::{
    load_csv, make_windows, CsvSchema, DatasetManifest, GroupConfig, GroupWindow, LabelConfig,
    WindowConfig,
};
use gimtp_core::model::ModelConfig;
use gimtp_core::train::TrainConfig;
use gimtp_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Track CSV. Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    pub schema: CsvSchema,
    pub manifest: DatasetManifest,
    pub group: GroupConfig,
    pub labels: LabelConfig,
    pub targets: Option<Vec<i64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Receives `checkpoint.bin` and `metrics.jsonl`.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("run") }
    }
}

/// Everything one training run needs. `seed` drives both parameter
/// initialization and the per-epoch shuffle and overrides `train.seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: OutputSection,
    pub seed: u64,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [Some(&mut cfg.data.path), Some(&mut cfg.output.dir), cfg.resume.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.manifest.validate()?;
        let m = &self.data.manifest;
        if m.history != self.model.history || m.horizon != self.model.horizon {
            return Err(Error::Config(format!(
                "manifest windows (T={}, F={}) differ from the model (T={}, F={})",
                m.history, m.horizon, self.model.history, self.model.horizon
            )));
        }
        if self.data.path.as_os_str().is_empty() {
            return Err(Error::Config("data.path is required".into()));
        }
        Ok(())
    }
}

impl DataSection {
    pub fn window_config(&self) -> WindowConfig {
        let m = &self.manifest;
        WindowConfig {
            history: m.history,
            horizon: m.horizon,
            stride: m.stride,
            group: GroupConfig { lane_orientation: m.lane_orientation, ..self.group.clone() },
            labels: LabelConfig { lane_orientation: m.lane_orientation, ..self.labels.clone() },
            targets: self.targets.clone(),
        }
    }

    /// Loads `path` (instead of `self.path`) and cuts its windows.
    pub fn windows_from(&self, path: &Path) -> Result<Vec<GroupWindow>> {
        if !path.exists() {
            return Err(Error::Usage(format!("data file {} not found", path.display())));
        }
        let tracks = load_csv(path, &self.schema, &self.manifest)?;
        make_windows(&tracks, &self.window_config())
    }
}
