//! Run configuration: one TOML document covering the task, model, training,
//! output paths and evaluation settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskSpec;
use crate::error::{Result, TsmError};
use crate::model::{AttentionLevels, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub paths: Paths,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Architecture settings; `L`, `K` and the seed come from the other sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub t_fixed: usize,
    pub widths: [usize; 3],
    pub attention_widths: [usize; 2],
    pub attention: AttentionLevels,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            t_fixed: m.t_fixed,
            widths: m.widths,
            attention_widths: m.attention_widths,
            attention: m.attention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Test-time density; the task's native `T` when unset.
    pub frames: Option<usize>,
    pub sweep: Vec<usize>,
    pub fusion_weights: [f64; 2],
    /// Number of test items `viz` exports response maps for.
    pub viz_items: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            frames: None,
            sweep: vec![8, 16, 32, 64],
            fusion_weights: [0.5, 0.5],
            viz_items: 4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TsmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| TsmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            TsmError::Config(m) => TsmError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TsmError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t_fixed: self.model.t_fixed,
            feature_dim: self.task.feature_dim,
            num_classes: self.task.classes,
            widths: self.model.widths,
            attention_widths: self.model.attention_widths,
            attention: self.model.attention,
            seed: self.train.seed,
        }
    }

    /// Apply a `--seed` override to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: TsmError| match e {
            TsmError::Config(_) => e,
            other => TsmError::Config(other.to_string()),
        };
        self.task.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.model_config().validate().map_err(wrap)?;
        if self.eval.frames == Some(0) || self.eval.sweep.contains(&0) {
            return Err(TsmError::Config("test densities must be positive".into()));
        }
        let [wa, wb] = self.eval.fusion_weights;
        if !(wa >= 0.0 && wb >= 0.0 && wa + wb > 0.0) {
            return Err(TsmError::Config(
                "fusion_weights must be non-negative and not both zero".into(),
            ));
        }
        Ok(())
    }
}
