//! Ground-truth world: vehicle dynamics over a material grid, synthetic
//! sensors, an expert driver and dataset collection.

pub mod dataset;
pub mod expert;
pub mod sensors;
pub mod track;
pub mod vehicle;

pub use dataset::{collect_dataset, make_transition, read_dataset_csv, write_dataset_csv, Dataset, Transition};
pub use expert::{ExpertConfig, ExpertDriver};
pub use sensors::{render_sensors, HistoryBuffer, SensorBundle, SensorConfig};
pub use track::{MaterialSpec, Path, Projection, TrackSpec};
pub use vehicle::{sim_step, Action, Pose2, SimState, VehicleParams, SIM_DT};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridmap::GridSpec;
use sensors::Signature;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation produced a non-finite value")]
    NonFinite,
    #[error("invalid world configuration: {0}")]
    Config(String),
    #[error("dataset csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serializable description of a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub grid: GridSpec,
    pub materials: Vec<MaterialSpec>,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub sensors: SensorConfig,
    pub track: TrackSpec,
}

/// Validated world with derived path geometry and sensor signatures.
#[derive(Clone, Debug)]
pub struct World {
    pub grid: GridSpec,
    pub materials: Vec<MaterialSpec>,
    pub vehicle: VehicleParams,
    pub sensors: SensorConfig,
    pub track: TrackSpec,
    path: Path,
    signatures: Vec<Signature>,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self, SimError> {
        cfg.grid.validate().map_err(|e| SimError::Config(e.to_string()))?;
        track::validate_materials(&cfg.materials)?;
        if !cfg.materials.iter().any(|m| m.id == 0) {
            return Err(SimError::Config("material 0 (off-layout surface) is required".into()));
        }
        cfg.track.validate(&cfg.grid, &cfg.materials)?;
        let path = Path::new(&cfg.track.waypoints)?;
        let signatures = cfg.materials.iter().map(|m| Signature::from_seed(m.embed_seed)).collect();
        Ok(Self {
            grid: cfg.grid,
            materials: cfg.materials,
            vehicle: cfg.vehicle,
            sensors: cfg.sensors,
            track: cfg.track,
            path,
            signatures,
        })
    }

    pub fn config(&self) -> WorldConfig {
        WorldConfig {
            grid: self.grid,
            materials: self.materials.clone(),
            vehicle: self.vehicle.clone(),
            sensors: self.sensors.clone(),
            track: self.track.clone(),
        }
    }

    pub fn from_track(track: TrackSpec) -> Self {
        Self::new(WorldConfig {
            grid: track::default_grid(),
            materials: track::default_materials(),
            vehicle: VehicleParams::default(),
            sensors: SensorConfig::default(),
            track,
        })
        .expect("preset worlds are valid")
    }

    /// The three preset training worlds.
    pub fn training() -> Vec<Self> {
        track::training_tracks().into_iter().map(Self::from_track).collect()
    }

    /// Preset evaluation world with rearranged materials.
    pub fn held_out() -> Self {
        Self::from_track(track::held_out_track())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String, SimError> {
        Ok(serde_json::to_string_pretty(&self.config())?)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn material_id_at(&self, x: f64, y: f64) -> u32 {
        match self.grid.world_to_cell(x, y) {
            Ok(c) => self.track.material_at_cell(c),
            Err(_) => 0,
        }
    }

    fn material_index(&self, id: u32) -> usize {
        self.materials.iter().position(|m| m.id == id).expect("layout ids are validated")
    }

    pub fn friction_at(&self, x: f64, y: f64) -> f64 {
        self.materials[self.material_index(self.material_id_at(x, y))].friction
    }

    pub fn signature(&self, id: u32) -> &Signature {
        &self.signatures[self.material_index(id)]
    }

    /// One 100 Hz step using the friction under the car.
    pub fn step(&self, s: &SimState, action: Action) -> Result<SimState, SimError> {
        sim_step(s, action, self.friction_at(s.pose.x, s.pose.y), &self.vehicle, SIM_DT)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let w = World::held_out();
        let text = w.to_json().unwrap();
        let back = World::from_json(&text).unwrap();
        assert_eq!(back.config(), w.config());
        let bad = text.replacen("\"lane_half_width\"", "\"lane_width\"", 1);
        assert!(World::from_json(&bad).is_err());
    }

    #[test]
    fn friction_follows_layout() {
        let w = World::held_out();
        assert_eq!(w.friction_at(100.0, 100.0), 1.0);
        let (x, y) = w.grid.cell_center(crate::gridmap::CellIndex::new(3, 4));
        let id = w.track.material_layout[4][3];
        assert_eq!(w.friction_at(x, y), w.materials.iter().find(|m| m.id == id).unwrap().friction);
    }
}
