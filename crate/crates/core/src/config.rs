//! Run configuration file: one JSON document with sections `model`,
//! `schedule`, `stages`, `trainer`, `inference` and `bench`. Unknown keys are
//! rejected; omitted sections take the desk defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::schedule::ScheduleConfig;
use crate::trainer::{StageConfig, TrainOptions, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub stages: StageConfig,
    pub trainer: TrainerConfig,
    pub inference: InferenceConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = ScheduleConfig::desk();
        Self {
            model: ModelConfig::desk(),
            stages: StageConfig::curriculum(&schedule, &[64, 128]),
            schedule,
            trainer: TrainerConfig::default(),
            inference: InferenceConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train_options(0).validate()?;
        self.inference.validate()?;
        if let Some(a) = &self.bench.attention {
            a.validate()?;
        }
        Ok(())
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            model: self.model.clone(),
            schedule: self.schedule.clone(),
            stages: self.stages.clone(),
            trainer: self.trainer.clone(),
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_roundtrips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"trainer": {"z_los": 1}}"#).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("z_los"), "{err}");
        let err = RunConfig::from_json(r#"{"optimiser": {}}"#).unwrap_err();
        assert!(err.to_string().contains("optimiser"), "{err}");
    }

    #[test]
    fn semantic_errors_are_validation_errors() {
        let err = RunConfig::from_json(r#"{"schedule": {"t_warmup": 99999999}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
