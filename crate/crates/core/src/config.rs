//! One declarative TOML document for every pipeline stage. Unknown keys are
//! rejected; all defaults materialize into the persisted effective config so
//! a run can be reproduced without implicit state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sample::SamplerSettings;
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta1: 1e-4, beta_t: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta1, self.beta_t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { scene: SceneConfig::default(), train_scenes: 2000, eval_scenes: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output root; the CLI layers `--out` and the environment variable on
    /// top of this.
    pub out: String,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub sample: SamplerSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build().map(|_| ())?;
        self.dataset.scene.validate()?;
        if self.dataset.train_scenes == 0 {
            return Err(Error::Config("dataset.train_scenes must be positive".into()));
        }
        if self.model.latent != self.dataset.scene.canvas {
            return Err(Error::Config(format!(
                "model.latent ({}) must equal dataset.scene.canvas ({})",
                self.model.latent, self.dataset.scene.canvas
            )));
        }
        self.train.validate()?;
        self.sample.validate()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fully materialized TOML (every default made explicit).
    pub fn effective_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("{e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.effective_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Every section appears in the effective document.
        for key in ["[model]", "[schedule]", "[dataset.scene]", "[train]", "[sample.guidance]"] {
            assert!(text.contains(key), "missing {key} in effective config");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("nonsense = 1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::from_toml_str("[model]\nwidth = 3").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn cross_field_validation() {
        let err = RunConfig::from_toml_str("[model]\nlatent = 16\npatch = 2\nsubject_patch = 8")
            .unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("canvas"), "{msg}");
    }

    #[test]
    fn overrides_parse() {
        let cfg = RunConfig::from_toml_str(
            "seed = 7\n[sample.guidance]\neta = 3.5\nguided_fraction = 0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sample.guidance.eta, 3.5);
        assert_eq!(cfg.sample.guidance.guided_fraction, 0.25);
    }
}
