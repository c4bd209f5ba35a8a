//! TOML run configuration. Every section is optional and falls back to the
//! desk defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::DataConfig;
use crate::train::StageConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Checkpoints, metrics and vocabulary land here.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs/desk"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            stage1: StageConfig::stage1_desk(),
            stage2: StageConfig::stage2_desk(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    /// Checks every section, plus that the longest rendered sequence fits
    /// the LM context once the image placeholder expands.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        if self.stage1.text_micro_batches != 0 {
            return Err(Error::Config(format!(
                "stage1.text_micro_batches must be 0, got {}",
                self.stage1.text_micro_batches
            )));
        }
        let k = self.model.abstractor.num_queries;
        for (what, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if s.max_len + k - 1 > self.model.lm.max_positions {
                return Err(Error::Config(format!(
                    "{what}.max_len {} plus {k} visual rows exceeds lm.max_positions {}",
                    s.max_len, self.model.lm.max_positions
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[stage1]\nwarmup = 3\n").unwrap_err().to_string();
        assert!(err.contains("warmup"), "{err}");
    }

    #[test]
    fn bad_values_name_the_field() {
        let err = RunConfig::from_toml("[stage1]\nwarmup_steps = 600\n").unwrap_err().to_string();
        assert!(err.contains("stage1.warmup_steps"), "{err}");
        let err = RunConfig::from_toml("[model.lm]\ndim = 130\n").unwrap_err().to_string();
        assert!(err.contains("config"), "{err}");
        let err = RunConfig::from_toml("[stage2]\nmax_len = 200\n").unwrap_err().to_string();
        assert!(err.contains("stage2.max_len"), "{err}");
    }
}
