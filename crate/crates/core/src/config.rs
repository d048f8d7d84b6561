use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial schedule `base_lr·(1 − t/T)^power`.
    pub poly_power: f64,
    pub max_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            poly_power: 0.9,
            max_steps: 3000,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: PathBuf,
    pub split_id: usize,
    /// Seed of the base/novel split construction.
    pub split_seed: u64,
    pub k_shot: usize,
    /// Seed of parameter initialization and the training episode stream.
    pub seed: u64,
    /// Seed of the evaluation episode stream.
    pub eval_seed: u64,
    pub eval_episodes: usize,
    /// Evaluate on the novel split every this many steps; 0 disables.
    pub eval_every: u64,
    /// Train on one fixed base episode every step.
    pub overfit_one_episode: bool,
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA,
            dataset: PathBuf::from("data/synth"),
            split_id: 0,
            split_seed: 0,
            k_shot: 1,
            seed: 0,
            eval_seed: 1234,
            eval_episodes: 200,
            eval_every: 0,
            overfit_one_episode: false,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "config schema {} is not supported (expected {CONFIG_SCHEMA})",
                self.schema_version
            )));
        }
        if self.k_shot == 0 {
            return Err(Error::Config("k_shot must be at least 1".into()));
        }
        let o = &self.optim;
        if !(o.base_lr.is_finite() && o.base_lr >= 0.0) {
            return Err(Error::Config(format!("base_lr {} must be non-negative", o.base_lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("SGD momentum {} outside [0, 1)", o.momentum)));
        }
        if !(o.poly_power.is_finite() && o.poly_power >= 0.0) {
            return Err(Error::Config("poly_power must be non-negative".into()));
        }
        if let Some(c) = o.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        self.model.validate()
    }

    /// Checks that the dataset directory exists.
    pub fn validate_paths(&self) -> Result<()> {
        if !self.dataset.is_dir() {
            return Err(Error::validation(
                &self.dataset,
                "dataset directory does not exist",
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
