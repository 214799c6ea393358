//! Pipeline configuration: one JSON file with `model`, `train`, `controller`,
//! `lidar`, `sim`, and `eval` sections. Every section (and every
//! pipeline-owned field) falls back to its default when omitted, so `{}` is a
//! complete config; nested objects from the library crates must be given in
//! full when overridden.

use std::fs;
use std::path::Path;

use lidarpilot_core::model::ModelConfig;
use lidarpilot_core::projection::GridConfig;
use lidarpilot_core::trainer::TrainConfig;
use lidarpilot_sim::episode::{EpisodeConfig, InterventionConfig};
use lidarpilot_sim::expert::ExpertConfig;
use lidarpilot_sim::raycast::LidarConfig;
use lidarpilot_sim::scenes::{CampusVariant, TrafficCondition};
use lidarpilot_sim::sensors::NoiseConfig;
use lidarpilot_sim::vehicle::VehicleParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path} is not valid: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown traffic condition {0:?}; expected clear, light, or busy")]
    UnknownCondition(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelConfigSection,
    pub train: TrainSection,
    pub controller: ControllerSection,
    pub lidar: LidarSection,
    pub sim: SimSection,
    pub eval: EvalSection,
}

/// Newtype wrappers give the library configs a `Default` for serde fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelConfigSection(pub ModelConfig);

impl Default for ModelConfigSection {
    fn default() -> Self {
        ModelConfigSection(ModelConfig::desk_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LidarSection(pub LidarConfig);

impl Default for LidarSection {
    fn default() -> Self {
        LidarSection(LidarConfig::desk_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub recipe: TrainConfig,
    /// Every k-th tick of a log becomes a training sample.
    pub sample_stride: usize,
    /// Every k-th episode is held out for validation.
    pub val_episode_stride: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { recipe: TrainConfig::default(), sample_stride: 4, val_episode_stride: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSection {
    /// Lateral PID gains [kp, ki, kd] on the aim-point bearing error (deg).
    pub lateral_gains: [f64; 3],
    /// Longitudinal PID gains [kp, ki, kd] on the speed error (m/s).
    pub longitudinal_gains: [f64; 3],
    /// Wheel radius used to turn measured wheel rates into linear speed.
    pub wheel_radius_m: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        ControllerSection {
            lateral_gains: [0.02, 0.001, 0.005],
            longitudinal_gains: [0.8, 0.1, 0.0],
            wheel_radius_m: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSection {
    pub dt: f64,
    /// Tick budget for data-generation episodes (and the expert reference
    /// run that sets closed-loop timeouts).
    pub max_ticks: usize,
    pub noise: NoiseConfig,
    pub intervention: InterventionConfig,
    pub expert: ExpertConfig,
    pub vehicle: VehicleParams,
    /// Maps the expert drives for training data.
    pub train_variants: Vec<CampusVariant>,
    /// Held-out map for offline test logs and closed-loop scoring.
    pub test_variant: CampusVariant,
    /// Routes driven on every map.
    pub route_indices: Vec<usize>,
    /// Traffic conditions by name: clear, light, busy.
    pub conditions: Vec<String>,
    /// Independent repetitions of the test-log matrix.
    pub test_repeats: usize,
    pub capture_lidar: bool,
    pub master_seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            dt: 0.25,
            max_ticks: 2400,
            noise: NoiseConfig::default(),
            intervention: InterventionConfig::default(),
            expert: ExpertConfig::default(),
            vehicle: VehicleParams::default(),
            train_variants: CampusVariant::training().to_vec(),
            test_variant: CampusVariant::heldout(),
            route_indices: (0..lidarpilot_sim::scenes::ROUTES_PER_MAP).collect(),
            conditions: vec!["clear".into(), "light".into(), "busy".into()],
            test_repeats: 3,
            capture_lidar: true,
            master_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Closed-loop repetitions per route.
    pub repeats: usize,
    /// An episode times out after this multiple of the expert's time.
    pub timeout_factor: f64,
    /// Skip corrupt log records with a warning instead of aborting.
    pub skip_corrupt: bool,
    /// Score with the commands stored in the log instead of re-deriving
    /// them from the logged route points (debugging aid).
    pub use_logged_commands: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            repeats: 3,
            timeout_factor: 3.0,
            skip_corrupt: false,
            use_logged_commands: false,
        }
    }
}

impl SimSection {
    pub fn conditions(&self) -> Result<Vec<TrafficCondition>, ConfigError> {
        self.conditions
            .iter()
            .map(|name| match name.as_str() {
                "clear" => Ok(TrafficCondition::clear()),
                "light" => Ok(TrafficCondition::light()),
                "busy" => Ok(TrafficCondition::busy()),
                other => Err(ConfigError::UnknownCondition(other.into())),
            })
            .collect()
    }

    pub fn episode(&self, lidar: &LidarConfig, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            dt: self.dt,
            max_ticks: self.max_ticks,
            lidar: *lidar,
            noise: self.noise,
            intervention: self.intervention,
            expert: self.expert,
            capture_lidar: self.capture_lidar,
            seed,
        }
    }
}

/// Grid geometries sized to the model's encoder inputs, so projections always
/// match what the network expects.
pub fn grid_configs(model: &ModelConfig) -> (GridConfig, GridConfig) {
    let mut front = GridConfig::front_default();
    front.height = model.front.input.1;
    front.width = model.front.input.2;
    let mut bev = GridConfig::bev_default();
    bev.height = model.bev.input.1;
    bev.width = model.bev.input.2;
    (front, bev)
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.display().to_string(),
        source,
    })
}
