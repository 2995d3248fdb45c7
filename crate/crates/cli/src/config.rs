//! Experiment configuration: one JSON document with defaults for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use surface_mbrl::dynamics::EnsembleSpec;
use surface_mbrl::eval::L2Config;
use surface_mbrl::mapper::{MapperSpec, Modalities};
use surface_mbrl::planner::{ControlConfig, IcemConfig, RewardWeights};
use surface_mbrl::sim::World;
use surface_mbrl::training::StageConfig;

use crate::CliError;

/// Model configurations compared by `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    NoMap,
    GroundTruth,
    Mapped(Modalities),
}

impl Variant {
    pub const VALID: &'static str = "no-map, GT, or a modality label such as S, A, I, AS, AIS";

    pub fn parse(label: &str) -> Result<Self, CliError> {
        match label {
            "no-map" => Ok(Self::NoMap),
            "GT" => Ok(Self::GroundTruth),
            other => Modalities::from_label(other)
                .map(Self::Mapped)
                .map_err(|_| CliError::Usage(format!("unknown variant {other:?}; valid: {}", Self::VALID))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::NoMap => "no-map".into(),
            Self::GroundTruth => "GT".into(),
            Self::Mapped(m) => m.label(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldPaths {
    /// World JSON files used for training; the presets when empty.
    pub train: Vec<PathBuf>,
    /// World JSON used for evaluation and racing; the held-out preset when absent.
    pub eval: Option<PathBuf>,
}

impl Default for WorldPaths {
    fn default() -> Self {
        Self {
            train: Vec::new(),
            eval: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden_dims: Vec<usize>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let d = EnsembleSpec::default();
        Self {
            members: d.members,
            hidden_dims: d.hidden_dims,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperConfig {
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub fusion_hidden: Vec<usize>,
}

impl Default for MapperConfig {
    fn default() -> Self {
        let d = MapperSpec::default();
        Self {
            encoder_hidden: d.encoder_hidden,
            feature_dim: d.feature_dim,
            fusion_hidden: d.fusion_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceConfig {
    pub laps: usize,
    /// Simulated seconds before a run gives up.
    pub max_time: f64,
    pub max_interventions: usize,
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            laps: 10,
            max_time: 600.0,
            max_interventions: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub l2: L2Config,
    /// Laps driven by the progressive mapping experiment.
    pub progressive_laps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            l2: L2Config {
                hypotheses: 20,
                ..Default::default()
            },
            progressive_laps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub worlds: WorldPaths,
    /// Latent dimension k_l shared by the map, mapper and dynamics.
    pub latent_dim: usize,
    pub ensemble: EnsembleConfig,
    pub mapper: MapperConfig,
    /// Variant matrix trained by `train` and compared by `eval`.
    pub variants: Vec<String>,
    /// Variant driven by `race` and exported by `export-map`.
    pub primary: String,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub icem: IcemConfig,
    pub reward: RewardWeights,
    pub race: RaceConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            worlds: WorldPaths::default(),
            latent_dim: 10,
            ensemble: EnsembleConfig::default(),
            mapper: MapperConfig::default(),
            variants: ["no-map", "S", "A", "I", "AS", "AIS", "GT"].map(String::from).to_vec(),
            primary: "AIS".into(),
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
            stage3: StageConfig::default(),
            icem: IcemConfig::default(),
            reward: RewardWeights::default(),
            race: RaceConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative world paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        cfg.worlds.train = cfg.worlds.train.iter().map(resolve).collect();
        cfg.worlds.eval = cfg.worlds.eval.as_ref().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for p in self.worlds.train.iter().chain(&self.worlds.eval) {
            if !p.exists() {
                return Err(CliError::Data(format!("world file {} does not exist", p.display())));
            }
        }
        if self.latent_dim == 0 {
            return Err(CliError::Usage("latent_dim must be at least 1".into()));
        }
        self.ensemble_spec().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for s in [&self.stage1, &self.stage2, &self.stage3] {
            s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        self.icem.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.reward.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.eval.l2.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.variants()?;
        Variant::parse(&self.primary)?;
        Ok(())
    }

    pub fn variants(&self) -> Result<Vec<Variant>, CliError> {
        self.variants.iter().map(|v| Variant::parse(v)).collect()
    }

    pub fn primary(&self) -> Result<Variant, CliError> {
        Variant::parse(&self.primary)
    }

    pub fn ensemble_spec(&self) -> EnsembleSpec {
        EnsembleSpec {
            members: self.ensemble.members,
            hidden_dims: self.ensemble.hidden_dims.clone(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn mapper_spec(&self, modalities: Modalities) -> MapperSpec {
        MapperSpec {
            encoder_hidden: self.mapper.encoder_hidden.clone(),
            feature_dim: self.mapper.feature_dim,
            fusion_hidden: self.mapper.fusion_hidden.clone(),
            latent_dim: self.latent_dim,
            modalities,
        }
    }

    pub fn train_worlds(&self) -> Result<Vec<World>, CliError> {
        if self.worlds.train.is_empty() {
            return Ok(World::training());
        }
        self.worlds.train.iter().map(|p| load_world(p)).collect()
    }

    pub fn eval_world(&self) -> Result<World, CliError> {
        match &self.worlds.eval {
            Some(p) => load_world(p),
            None => Ok(World::held_out()),
        }
    }

    pub fn control(&self, deterministic: bool, seed: u64) -> ControlConfig {
        ControlConfig {
            icem: self.icem.clone(),
            weights: self.reward.clone(),
            laps: self.race.laps,
            max_time: self.race.max_time,
            deterministic,
            seed,
            max_interventions: self.race.max_interventions,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn load_world(path: &Path) -> Result<World, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    World::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"stage1": {"epochs": 3, "lr": 1}}"#).is_err());
    }

    #[test]
    fn missing_world_file_fails_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"worlds": {"eval": "nowhere.json"}}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(CliError::Data(_))));
        std::fs::write(dir.path().join("w.json"), World::held_out().to_json().unwrap()).unwrap();
        std::fs::write(&p, r#"{"worlds": {"eval": "w.json"}}"#).unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.eval_world().unwrap().track, World::held_out().track);
    }

    #[test]
    fn variants_parse_and_list_valid_labels() {
        assert_eq!(Variant::parse("no-map").unwrap(), Variant::NoMap);
        assert_eq!(Variant::parse("GT").unwrap(), Variant::GroundTruth);
        assert_eq!(Variant::parse("AIS").unwrap().label(), "AIS");
        let err = Variant::parse("XYZ").unwrap_err().to_string();
        assert!(err.contains("no-map") && err.contains("AIS"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
