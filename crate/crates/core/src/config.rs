//! Application configuration: one JSON document that pins every knob of an
//! end-to-end run — scene geometry, noise, matcher architecture, training
//! hyperparameters, evaluation sizes, and engine worker counts — so a run is
//! reproducible from the config file plus a seed.
//!
//! Every field has a default and the parser fills in missing fields, so a
//! config file only needs to state what it overrides.

use crate::geometry::{CameraExtrinsics, CameraIntrinsics, GeometryError, PanelConfig};
use crate::nets::{MatchNetArch, TrainHyper};
use crate::synthgen::NoiseModel;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Errors from loading or validating a configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Camera description; a missing `extrinsics` means the standard mounting
/// (on the panel plane at the panel's camera height, horizontally centered).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: Option<CameraExtrinsics>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            extrinsics: None,
        }
    }
}

impl CameraConfig {
    /// Resolved extrinsics: explicit ones, or the standard panel mounting.
    pub fn extrinsics_for(&self, panel: &PanelConfig) -> CameraExtrinsics {
        self.extrinsics
            .clone()
            .unwrap_or_else(|| CameraExtrinsics::centered_on_panel(panel))
    }
}

/// Matcher training: architecture, optimizer settings, and how much
/// synthetic data to generate for the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: MatchNetArch,
    pub hyper: TrainHyper,
    /// Cells sampled (with replacement) per training scenario.
    pub cells_per_scenario: u32,
    /// How many times the cell sampling is repeated per scenario.
    pub repeats: u32,
    /// Frames emitted per training dwell.
    pub frames_per_dwell: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: MatchNetArch::default(),
            hyper: TrainHyper::default(),
            cells_per_scenario: 12,
            repeats: 1,
            frames_per_dwell: 6,
        }
    }
}

/// Evaluation sizes: how many dwells each condition contributes and how
/// finely noise is swept in degradation runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Frames per evaluation dwell.
    pub frames_per_dwell: u32,
    /// Cells gazed per (user, distance, condition) combination.
    pub cells_per_condition: u32,
    /// Dwell repetitions per cell draw for multi-user groups.
    pub repetitions: u32,
    /// Multipliers applied to the base gaze noise for degradation sweeps;
    /// `1.0` is the calibrated operating point.
    pub noise_scales: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frames_per_dwell: 10,
            cells_per_condition: 10,
            repetitions: 2,
            noise_scales: vec![1.0],
        }
    }
}

/// Worker counts and queue depth for the live (non-simulated) engine run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnginePoolConfig {
    pub face_workers: usize,
    pub gaze_workers: usize,
    pub match_workers: usize,
    pub queue_capacity: usize,
}

impl Default for EnginePoolConfig {
    fn default() -> Self {
        Self {
            face_workers: 2,
            gaze_workers: 1,
            match_workers: 1,
            queue_capacity: 8,
        }
    }
}

/// Root configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// Master seed; derived seeds (training data, evaluation data, shuffle)
    /// are offsets from it.
    pub seed: u64,
    pub panel: PanelConfig,
    pub camera: CameraConfig,
    /// Measurement noise at the calibrated operating point.
    pub noise: NoiseModel,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub engine: EnginePoolConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            panel: PanelConfig::default(),
            camera: CameraConfig::default(),
            noise: NoiseModel::noiseless(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            engine: EnginePoolConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String, ConfigError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        Ok(std::fs::write(path, self.to_json_string()? + "\n")?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.panel.validate()?;
        self.camera.intrinsics.validate()?;
        self.noise
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.cells_per_scenario == 0
            || self.train.repeats == 0
            || self.train.frames_per_dwell == 0
        {
            return Err(ConfigError::Invalid(
                "training data sizes must be positive".into(),
            ));
        }
        if self.eval.frames_per_dwell == 0
            || self.eval.cells_per_condition == 0
            || self.eval.repetitions == 0
        {
            return Err(ConfigError::Invalid(
                "evaluation sizes must be positive".into(),
            ));
        }
        if self.eval.noise_scales.is_empty() {
            return Err(ConfigError::Invalid(
                "at least one noise scale is required".into(),
            ));
        }
        if self.eval.noise_scales.iter().any(|s| !(*s >= 0.0)) {
            return Err(ConfigError::Invalid(
                "noise scales must be non-negative".into(),
            ));
        }
        if self.engine.face_workers == 0
            || self.engine.gaze_workers == 0
            || self.engine.match_workers == 0
            || self.engine.queue_capacity == 0
        {
            return Err(ConfigError::Invalid(
                "engine worker counts and queue capacity must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Seed for training-data generation.
    pub fn train_data_seed(&self) -> u64 {
        self.seed
    }

    /// Seed for evaluation-data generation (kept distinct from training).
    pub fn eval_data_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}
