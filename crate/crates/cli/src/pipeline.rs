//! Artifact layout and the work behind each command.
//!
//! ```text
//! <data>/train_<i>.csv        one file per training world
//! <data>/eval.csv             drive on the evaluation world
//! <models>/stage1/ensemble/   stage-1 dynamics
//! <models>/stage1/latents/    stage-1 per-cell latents
//! <models>/stage2/<label>/    mapper of each mapped variant
//! <models>/stage3/<label>/    final dynamics of every variant, baselines included
//! <models>/train_log.csv      every stage's log, in stage order
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use surface_mbrl::dynamics::{material_code, Ensemble};
use surface_mbrl::gridmap::LatentMap;
use surface_mbrl::mapper::{CellMapper, Mapper};
use surface_mbrl::nn::MIN_LOG_VAR;
use surface_mbrl::planner::{control_loop, ControlConfig, RunOutput};
use surface_mbrl::sim::{collect_dataset, read_dataset_csv, write_dataset_csv, Dataset, Pose2, World};
use surface_mbrl::training::{
    derive_seed, group_by_cell, read_train_log, run_ground_truth, run_no_map, run_stage1, run_stage2, run_stage3, write_train_log,
    CellGroupedDataset, LatentTable, TrainLogRow,
};

use crate::config::{ExperimentConfig, Variant};
use crate::CliError;

/// Lateral slip angle above which a transition counts as a slip event.
pub const SLIP_EVENT_DEG: f64 = 10.0;
/// Speed below which the slip angle is taken as zero.
const SLIP_MIN_SPEED: f64 = 0.3;

pub const TRAIN_LOG: &str = "train_log.csv";

pub fn train_data_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("train_{i}.csv"))
}

pub fn eval_data_path(dir: &Path) -> PathBuf {
    dir.join("eval.csv")
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    write_dataset_csv(ds, BufWriter::new(file))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    read_dataset_csv(BufReader::new(file), Pose2::default()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CollectSummary {
    pub transitions: usize,
    pub cells: usize,
    pub traversals: usize,
    pub slip_events: usize,
}

impl CollectSummary {
    pub fn of(ds: &Dataset) -> Self {
        let cells: HashSet<_> = ds.transitions.iter().map(|t| t.cell).collect();
        let slip_events = ds
            .transitions
            .iter()
            .filter(|t| {
                let (vx, vy) = (t.s_in[0], t.s_in[1]);
                vx.hypot(vy) >= SLIP_MIN_SPEED && vy.atan2(vx.abs()).abs() > SLIP_EVENT_DEG.to_radians()
            })
            .count();
        Self {
            transitions: ds.len(),
            cells: cells.len(),
            traversals: ds.traversal_ranges().len(),
            slip_events,
        }
    }
}

/// Drives `minutes` split evenly over the training worlds plus
/// `eval_minutes` on the evaluation world, writing one CSV per drive.
pub fn collect(cfg: &ExperimentConfig, seed: u64, minutes: f64, eval_minutes: f64, dir: &Path) -> Result<Vec<(PathBuf, CollectSummary)>, CliError> {
    if !(minutes > 0.0) || !(eval_minutes >= 0.0) {
        return Err(CliError::Usage("--minutes must be positive and --eval-minutes non-negative".into()));
    }
    let worlds = cfg.train_worlds()?;
    let per_world = minutes * 60.0 / worlds.len() as f64;
    let mut drives: Vec<(PathBuf, Dataset)> = Vec::with_capacity(worlds.len() + 1);
    for (i, w) in worlds.iter().enumerate() {
        drives.push((train_data_path(dir, i), collect_dataset(w, per_world, derive_seed(seed, 100 + i as u64))?));
    }
    if eval_minutes > 0.0 {
        drives.push((eval_data_path(dir), collect_dataset(&cfg.eval_world()?, eval_minutes * 60.0, derive_seed(seed, 200))?));
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(drives.len());
    for (path, ds) in drives {
        write_dataset(&path, &ds)?;
        out.push((path, CollectSummary::of(&ds)));
    }
    Ok(out)
}

/// Loads `train_<i>.csv` for every configured training world and groups the
/// transitions by cell.
pub fn load_training(cfg: &ExperimentConfig, dir: &Path) -> Result<CellGroupedDataset, CliError> {
    let worlds = cfg.train_worlds()?;
    let data = (0..worlds.len()).map(|i| read_dataset(&train_data_path(dir, i))).collect::<Result<Vec<_>, _>>()?;
    let maps: Vec<_> = worlds.iter().zip(&data).map(|(w, d)| (w.grid, d)).collect();
    Ok(group_by_cell(&maps)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Three,
    All,
}

impl Stage {
    fn includes(self, n: u8) -> bool {
        match self {
            Self::One => n == 1,
            Self::Two => n == 2,
            Self::Three => n == 3,
            Self::All => true,
        }
    }
}

/// Checkpoint locations below a models directory.
#[derive(Clone, Debug)]
pub struct ModelDir {
    pub root: PathBuf,
}

impl ModelDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }

    pub fn stage1_ensemble(&self) -> PathBuf {
        self.stage1().join("ensemble")
    }

    pub fn stage1_latents(&self) -> PathBuf {
        self.stage1().join("latents")
    }

    pub fn stage2(&self, v: Variant) -> PathBuf {
        self.root.join("stage2").join(v.label())
    }

    pub fn stage3(&self, v: Variant) -> PathBuf {
        self.root.join("stage3").join(v.label())
    }

    fn require(path: &Path, stage: u8, what: &str) -> Result<(), CliError> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::Data(format!(
                "stage {stage} artifacts missing: no {what} at {}; run `train --stage {stage}` first",
                path.display()
            )))
        }
    }

    pub fn load_stage1(&self) -> Result<(Ensemble, LatentTable), CliError> {
        Self::require(&self.stage1_ensemble(), 1, "stage-1 ensemble")?;
        Self::require(&self.stage1_latents(), 1, "stage-1 latents")?;
        Ok((Ensemble::load(&self.stage1_ensemble())?, LatentTable::load(&self.stage1_latents())?))
    }

    pub fn load_mapper(&self, v: Variant) -> Result<Mapper, CliError> {
        let dir = self.stage2(v);
        Self::require(&dir, 2, &format!("mapper for variant {}", v.label()))?;
        Ok(Mapper::load(&dir)?)
    }

    pub fn load_final(&self, v: Variant) -> Result<Ensemble, CliError> {
        let dir = self.stage3(v);
        Self::require(&dir, 3, &format!("final dynamics for variant {}", v.label()))?;
        Ok(Ensemble::load(&dir)?)
    }

    /// Final models of one variant.
    pub fn load_variant(&self, v: Variant) -> Result<VariantModel, CliError> {
        let ensemble = self.load_final(v)?;
        let mapper = match v {
            Variant::Mapped(_) => Some(self.load_mapper(v)?),
            _ => None,
        };
        Ok(VariantModel { variant: v, ensemble, mapper })
    }
}

fn write_log(path: &Path, rows: &[TrainLogRow]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    write_train_log(rows, BufWriter::new(file))?;
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<TrainLogRow>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(read_train_log(BufReader::new(file))?)
}

fn relabel(rows: &mut [TrainLogRow], v: Variant) {
    for r in rows {
        r.stage = format!("{}/{}", r.stage, v.label());
    }
}

/// Last loss of each stage trained by one call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub final_losses: Vec<(String, f64)>,
}

/// Trains the requested stage(s) for every configured variant.
///
/// Stage 1 fits the shared dynamics and latent table, stage 2 one mapper per
/// mapped variant, stage 3 the final dynamics per mapped variant together with
/// the no-map and ground-truth baselines.
pub fn train(cfg: &ExperimentConfig, seed: u64, stage: Stage, data_dir: &Path, models: &ModelDir) -> Result<TrainSummary, CliError> {
    let variants = cfg.variants()?;
    let mapped: Vec<Variant> = variants.iter().copied().filter(|v| matches!(v, Variant::Mapped(_))).collect();
    if stage == Stage::Two {
        ModelDir::require(&models.stage1_latents(), 1, "stage-1 latents")?;
    }
    if stage == Stage::Three && !mapped.is_empty() {
        ModelDir::require(&models.stage1_ensemble(), 1, "stage-1 ensemble")?;
        for &v in &mapped {
            ModelDir::require(&models.stage2(v), 2, &format!("mapper for variant {}", v.label()))?;
        }
    }
    let grouped = load_training(cfg, data_dir)?;
    let mut summary = TrainSummary::default();
    let mut note = |name: String, rows: &[TrainLogRow]| {
        let last = rows.last().map_or(f64::NAN, |r| if r.stage.starts_with('2') { r.loss_mapper } else { r.loss_dyn });
        eprintln!("trained {name}: final loss {last:.6}");
        summary.final_losses.push((name, last));
    };

    if stage.includes(1) {
        let out = run_stage1(&cfg.ensemble_spec(), &grouped, &cfg.stage1, seed)?;
        std::fs::create_dir_all(models.stage1())?;
        out.ensemble.save(&models.stage1_ensemble())?;
        out.latents.save(&models.stage1_latents())?;
        write_log(&models.stage1().join(TRAIN_LOG), &out.log)?;
        note("stage1".into(), &out.log);
    }
    if stage.includes(2) && !mapped.is_empty() {
        let (_, latents) = models.load_stage1()?;
        for &v in &mapped {
            let Variant::Mapped(m) = v else { unreachable!() };
            let (mapper, mut log) = run_stage2(&cfg.mapper_spec(m), &latents, &grouped, &cfg.stage2, seed)?;
            relabel(&mut log, v);
            let dir = models.stage2(v);
            mapper.save(&dir)?;
            write_log(&dir.join(TRAIN_LOG), &log)?;
            note(format!("stage2/{}", v.label()), &log);
        }
    }
    if stage.includes(3) {
        let stage1 = if mapped.is_empty() { None } else { Some(models.load_stage1()?.0) };
        for &v in &variants {
            let (ens, mut log) = match v {
                Variant::Mapped(_) => {
                    let mapper = models.load_mapper(v)?;
                    let base = stage1.clone().expect("loaded when mapped variants exist");
                    run_stage3(base, &[&mapper as &dyn CellMapper], &grouped, &cfg.stage3, seed)?
                }
                Variant::NoMap => run_no_map(&cfg.ensemble_spec(), &grouped, &cfg.stage3, seed)?,
                Variant::GroundTruth => {
                    let tracks: Vec<_> = cfg.train_worlds()?.into_iter().map(|w| w.track).collect();
                    run_ground_truth(&cfg.ensemble_spec(), &tracks, &grouped, &cfg.stage3, seed)?
                }
            };
            relabel(&mut log, v);
            let dir = models.stage3(v);
            ens.save(&dir)?;
            write_log(&dir.join(TRAIN_LOG), &log)?;
            note(format!("stage3/{}", v.label()), &log);
        }
    }
    merge_logs(cfg, models)?;
    Ok(summary)
}

/// Rewrites `<models>/train_log.csv` from every per-stage log present.
pub fn merge_logs(cfg: &ExperimentConfig, models: &ModelDir) -> Result<Vec<TrainLogRow>, CliError> {
    let variants = cfg.variants()?;
    let mut paths = vec![models.stage1().join(TRAIN_LOG)];
    paths.extend(variants.iter().filter(|v| matches!(v, Variant::Mapped(_))).map(|&v| models.stage2(v).join(TRAIN_LOG)));
    paths.extend(variants.iter().map(|&v| models.stage3(v).join(TRAIN_LOG)));
    let mut rows = Vec::new();
    for p in paths.iter().filter(|p| p.exists()) {
        rows.extend(read_log(p)?);
    }
    std::fs::create_dir_all(&models.root)?;
    write_log(&models.root.join(TRAIN_LOG), &rows)?;
    Ok(rows)
}

/// Final models of one variant.
#[derive(Clone, Debug)]
pub struct VariantModel {
    pub variant: Variant,
    pub ensemble: Ensemble,
    pub mapper: Option<Mapper>,
}

impl VariantModel {
    pub fn mapper(&self) -> Option<&dyn CellMapper> {
        self.mapper.as_ref().map(|m| m as &dyn CellMapper)
    }

    /// Map the controller starts from: empty for learned and blind models,
    /// filled with material codes for the ground-truth model.
    pub fn initial_map(&self, world: &World) -> Result<LatentMap, CliError> {
        let k = self.ensemble.latent_dim().max(1);
        let map = LatentMap::new(world.grid, k)?;
        if self.variant == Variant::GroundTruth {
            for i in 0..world.grid.num_cells() {
                let c = world.grid.cell_at(i);
                map.apply_update(c, &[material_code(world.track.material_at_cell(c))], &[MIN_LOG_VAR])?;
            }
        }
        Ok(map)
    }

    /// Closed-loop drive with the model, mapping online when it has a mapper.
    pub fn race(&self, world: &World, ctrl: &ControlConfig) -> Result<RunOutput, CliError> {
        let map = self.initial_map(world)?;
        Ok(control_loop(world, &self.ensemble, self.mapper(), &map, ctrl)?)
    }
}
