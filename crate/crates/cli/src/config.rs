//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use urwkv::data::{load_dataset, SegSample, SyntheticSpec};
use urwkv::model::ModelConfig;
use urwkv::train::TrainConfig;
use urwkv::Error;

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

/// Where samples come from: a dataset directory or the in-memory generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticSpec {
            seed: 0,
            count: 200,
            size: 64,
        })
    }
}

impl DataSource {
    pub fn load(&self) -> urwkv::Result<Vec<SegSample>> {
        match self {
            Self::Path(dir) => load_dataset(dir),
            Self::Synthetic(spec) => Ok(spec.generate()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Strict parse; unknown keys at any level are rejected by name.
    pub fn parse(text: &str) -> urwkv::Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> urwkv::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Copy with every default written out, including the output directory.
    pub fn resolved(&self, output: &Path) -> Self {
        Self {
            model: self.model.resolved(),
            train: self.train.clone(),
            data: self.data.clone(),
            output: Some(output.to_path_buf()),
        }
    }

    /// `--out` wins over the config's `output`.
    pub fn output_dir(&self, flag: Option<&Path>) -> urwkv::Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .ok_or_else(|| {
                Error::Config("no output directory: pass --out or set \"output\"".into())
            })
    }

    pub fn write_resolved(&self, dir: &Path) -> urwkv::Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&self.resolved(dir))?;
        fs::write(dir.join(RESOLVED_CONFIG), text + "\n")?;
        Ok(())
    }
}
