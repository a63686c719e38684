//! Run configuration: a single JSON-serializable struct covering the model,
//! the training loop, and the synthetic dataset, plus command-line overrides.

use crate::error::{IrimError, Result};
use crate::model::ModelConfig;
use crate::phantom::PhantomConfig;
use crate::rng::derive_seed;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision '{other}' (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    /// number of training images synthesized
    pub dataset_size: usize,
    /// number of held-out evaluation images
    pub eval_size: usize,
    /// accelerations evaluated (the model is trained at `train.acceleration`)
    pub eval_accelerations: Vec<f64>,
    pub precision: Precision,
}

impl RunConfig {
    /// Desktop-scale profile: 16 channels, 4 steps, 6 layers per step, 32x32
    /// phantoms, trained at 4x acceleration.
    pub fn desk(seed: u64) -> Self {
        let mut cfg = RunConfig {
            model: ModelConfig::desk(seed),
            train: TrainConfig::default(),
            phantom: PhantomConfig::default(),
            dataset_size: 32,
            eval_size: 8,
            eval_accelerations: vec![4.0, 8.0],
            precision: Precision::F64,
        };
        // full-pixel loss: at this image size sparse masking starves the signal
        cfg.train.loss.keep_fraction = 1.0;
        cfg.apply_seed(seed);
        cfg
    }

    /// Derives all component seeds from one base seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = derive_seed(seed, 1);
        self.train.loss.seed = derive_seed(seed, 2);
        self.phantom.seed = derive_seed(seed, 3);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.loss.validate(self.model.time_steps)?;
        self.phantom.validate()?;
        if self.dataset_size == 0 {
            return Err(IrimError::Config("dataset_size must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(IrimError::Config("batch_size must be positive".into()));
        }
        let max_down = self
            .model
            .downsample_schedule
            .iter()
            .copied()
            .max()
            .unwrap_or(1);
        if self.phantom.height % max_down != 0 || self.phantom.width % max_down != 0 {
            return Err(IrimError::Config(format!(
                "phantom extent {}x{} not divisible by max downsampling {max_down}",
                self.phantom.height, self.phantom.width
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        crate::io::write_atomic(path, &json)
    }
}

/// Resolves the effective config: defaults, then an optional config file, then
/// individual flag overrides.
pub fn resolve(
    config_path: Option<&Path>,
    seed: Option<u64>,
    precision: Option<Precision>,
) -> Result<RunConfig> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(0),
    };
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    if let Some(p) = precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}
