use std::path::Path;

use gestor_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

/// `--config` file: the model/schedule keys at top level plus an optional
/// `train` object, e.g. `{"N":1000,"beta1":1e-4,"betaN":0.08,"M":2,...,"train":{"steps":200}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, fallback: ModelConfig) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                model: fallback,
                train: TrainConfig::default(),
            });
        };
        let text = std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }
}
