//! Run configuration: every module's settings in one TOML document.
//!
//! Precedence, lowest first: built-in defaults, the config file, then
//! command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use replaymap_core::lidar_sim::{LidarModel, Orbit, Primitive, Scene};
use replaymap_core::mesher::MesherConfig;
use replaymap_core::metrics::EvalConfig;
use replaymap_core::trainer::TrainConfig;
use replaymap_core::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub mesher: MesherConfig,
    pub eval: EvalConfig,
    pub sim: SimConfig,
    pub output: OutputConfig,
}

/// Synthetic sequence generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub frames: usize,
    pub scene: Scene,
    pub lidar: LidarModel,
    pub orbit: Orbit,
    /// Lattice spacing of the ground-truth mesh (m).
    pub gt_spacing: f64,
    /// Region meshed for the ground truth.
    pub gt_bounds: [Vec3; 2],
}

impl Default for SimConfig {
    fn default() -> Self {
        let (room_min, room_max) = (Vec3::new(-6.0, -6.0, 0.0), Vec3::new(6.0, 6.0, 6.0));
        let mut scene = Scene::new(vec![Primitive::Sphere { center: Vec3::new(0.0, 0.0, 3.0), radius: 2.0 }]);
        scene.add_room(room_min, room_max);
        SimConfig {
            frames: 50,
            scene,
            lidar: LidarModel {
                azimuth_count: 360,
                elevation_count: 64,
                elevation_min_deg: -75.0,
                elevation_max_deg: 75.0,
                max_range: 30.0,
                noise_slope: 0.002,
                seed: 0,
            },
            orbit: Orbit::default(),
            gt_spacing: 0.05,
            gt_bounds: [room_min - Vec3::splat(0.3), room_max + Vec3::splat(0.3)],
        }
    }
}

/// What a mapping run writes besides reports and the final checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Write a mesh and checkpoint every this many frames; 0 disables.
    pub mesh_every: usize,
    /// Write ascii rather than binary PLY.
    pub ascii_ply: bool,
    /// Dump the final replay pool as a PLY point cloud with a `label` property.
    pub dump_pool: bool,
    /// Dump the final per-voxel uncertainty as CSV.
    pub dump_uncertainty: bool,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        RunConfig::from_toml_str(&text, &path.display().to_string())
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Every field, defaults included.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("configuration is always serializable")
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.eval.seed = seed;
        self.sim.lidar.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.into()));
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.mesher.spacing > 0.0) {
            return invalid("mesher.spacing must be positive");
        }
        if let Some([a, b]) = self.mesher.bounds {
            if !(a.x <= b.x && a.y <= b.y && a.z <= b.z) {
                return invalid("mesher.bounds must be ordered [min, max]");
            }
        }
        if self.eval.n_points == 0 || !(self.eval.threshold > 0.0) {
            return invalid("eval.n_points and eval.threshold must be positive");
        }
        if self.sim.frames == 0 || !self.sim.lidar.is_valid() || !self.sim.scene.is_valid() {
            return invalid("sim needs frames >= 1, a valid lidar model and valid primitives");
        }
        if !(self.sim.gt_spacing > 0.0) || self.sim.orbit.radius < 0.0 {
            return invalid("sim.gt_spacing must be positive and sim.orbit.radius non-negative");
        }
        Ok(())
    }
}
