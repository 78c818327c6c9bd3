use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainerConfig;

/// File name of the resolved-config echo in the output directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Images to generate (synthetic source only).
    pub count: usize,
    /// Directory of P6 files (directory source only).
    pub path: Option<PathBuf>,
    /// Image side; must agree with the model when given.
    pub size: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            count: 256,
            path: None,
            size: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.trainer.validate()?;
        if let Some(n) = self.schedule.num_layers {
            if n != self.model.num_layers() {
                return Err(Error::config(
                    "schedule.num_layers",
                    format!("model has {} freezable layers, got {n}", self.model.num_layers()),
                ));
            }
        }
        match self.data.source {
            DataSource::Synthetic if self.data.count == 0 => {
                return Err(Error::config("data.count", "must be at least 1"));
            }
            DataSource::Directory if self.data.path.is_none() => {
                return Err(Error::config("data.path", "required when data.source is \"directory\""));
            }
            _ => {}
        }
        if let Some(s) = self.data.size {
            if s != self.model.image_size {
                return Err(Error::config(
                    "data.size",
                    format!("must equal model.image_size {}, got {s}", self.model.image_size),
                ));
            }
        }
        Ok(())
    }

    /// Layer count the schedule runs over.
    pub fn num_layers(&self) -> usize {
        self.schedule.num_layers.unwrap_or_else(|| self.model.num_layers())
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Strictly parses a config document. With a preset, the preset's model
/// section is the base that the document's `model` keys override.
pub fn parse_config_str(text: &str, preset: Option<&str>) -> Result<RunConfig> {
    let mut doc: Value = serde_json::from_str(text)?;
    if !doc.is_object() {
        return Err(Error::config("<root>", "config must be a JSON object"));
    }
    if let Some(name) = preset {
        let mut model = serde_json::to_value(ModelConfig::preset(name)?)?;
        if let Some(user) = doc.as_object_mut().and_then(|o| o.remove("model")) {
            merge(&mut model, user);
        }
        doc.as_object_mut().unwrap().insert("model".into(), model);
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path, preset: Option<&str>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: format!("cannot read config: {e}"),
    })?;
    parse_config_str(&text, preset).map_err(|e| match e {
        Error::Json(j) => Error::Format {
            path: path.to_path_buf(),
            message: j.to_string(),
        },
        other => other,
    })
}

pub fn resolved_json(cfg: &RunConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)? + "\n")
}

/// Creates `dir` if needed and proves it is writable.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".vitfreeze-write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

pub fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, resolved_json(cfg)?)?;
    Ok(path)
}
