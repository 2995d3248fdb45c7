//! Argument parsing and the five subcommands.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use surface_mbrl::dynamics::MaterialLatent;
use surface_mbrl::eval::{
    append_metrics, l2_metric, lap_metrics, map_structure, pca_export, progressive_experiment, replay_map, write_map_export, L2Latents,
    LapMetrics, MetricRow,
};
use surface_mbrl::gridmap::MapSnapshot;
use surface_mbrl::planner::RunLog;
use surface_mbrl::sim::World;

use crate::config::{ExperimentConfig, Variant};
use crate::manifest::Manifest;
use crate::pipeline::{self, eval_data_path, ModelDir, Stage, VariantModel};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "surface-mbrl", version, about = "Surface-aware model-based racing experiments")]
struct Cli {
    /// Experiment config JSON; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Map updates run inline in the control loop so runs replay exactly.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Drive the expert on every training world and the evaluation world.
    Collect {
        /// Training minutes, split evenly over the training worlds.
        #[arg(long, default_value_t = 15.0)]
        minutes: f64,
        /// Minutes on the evaluation world; 0 skips it.
        #[arg(long, default_value_t = 2.0)]
        eval_minutes: f64,
        /// Dataset directory; `<output_dir>/data` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the dynamics, mappers and baselines.
    Train {
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory; `<output_dir>/models` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every configured variant and append rows to the metrics CSV.
    Eval {
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Result directory; `<output_dir>/eval` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Race the primary variant on the evaluation world.
    Race {
        #[arg(long)]
        laps: Option<usize>,
        /// Variant to drive instead of the configured primary one.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Result directory; `<output_dir>/race` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the primary variant's map from the evaluation drive and export it.
    ExportMap {
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Result directory; `<output_dir>/map` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    L2,
    Laps,
    Progressive,
    Map,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_LOG_FILE: &str = "run_log.csv";
pub const LAP_METRICS_FILE: &str = "lap_metrics.json";
pub const MAP_FILE: &str = "map.csv";
pub const MAP_EXPORT_FILE: &str = "map_export.csv";

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    deterministic: bool,
}

impl Ctx {
    fn dir(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.cfg.output_dir.join(default))
    }

    fn manifest(&self, dir: &Path, command: &str) -> Result<Manifest, CliError> {
        Manifest::write(dir, command, &self.cfg.hash(), self.seed, self.deterministic)
    }
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string().trim_end().to_string())),
    };
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let c = ExperimentConfig::default();
            c.validate()?;
            c
        }
    };
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(cfg.seed),
        cfg,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Collect { minutes, eval_minutes, out } => collect(&ctx, minutes, eval_minutes, ctx.dir(out, "data")),
        Command::Train { stage, data, out } => {
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Two => Stage::Two,
                StageArg::Three => Stage::Three,
                StageArg::All => Stage::All,
            };
            train(&ctx, stage, ctx.dir(data, "data"), ctx.dir(out, "models"))
        }
        Command::Eval { metric, models, data, out } => eval(&ctx, metric, ctx.dir(models, "models"), ctx.dir(data, "data"), ctx.dir(out, "eval")),
        Command::Race { laps, variant, models, out } => race(&ctx, laps, variant, ctx.dir(models, "models"), ctx.dir(out, "race")),
        Command::ExportMap { models, data, out } => {
            let (snapshot, _) = primary_map(&ctx, &ctx.dir(models, "models"), &ctx.dir(data, "data"))?;
            let out = ctx.dir(out, "map");
            write_map(&snapshot, &out)?;
            ctx.manifest(&out, "export-map")?;
            println!("map written to {}", out.display());
            Ok(())
        }
    }
}

fn collect(ctx: &Ctx, minutes: f64, eval_minutes: f64, out: PathBuf) -> Result<(), CliError> {
    let summaries = pipeline::collect(&ctx.cfg, ctx.seed, minutes, eval_minutes, &out)?;
    println!("{:<16} {:>11} {:>6} {:>10} {:>11}", "file", "transitions", "cells", "traversals", "slip_events");
    for (path, s) in &summaries {
        let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
        println!("{name:<16} {:>11} {:>6} {:>10} {:>11}", s.transitions, s.cells, s.traversals, s.slip_events);
    }
    ctx.manifest(&out, "collect")?;
    Ok(())
}

fn train(ctx: &Ctx, stage: Stage, data: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let summary = pipeline::train(&ctx.cfg, ctx.seed, stage, &data, &ModelDir::new(&out))?;
    for (name, loss) in &summary.final_losses {
        println!("{name:<16} final loss {loss:.6}");
    }
    ctx.manifest(&out, "train")?;
    Ok(())
}

fn load_eval_data(data: &Path) -> Result<surface_mbrl::sim::Dataset, CliError> {
    let ds = pipeline::read_dataset(&eval_data_path(data))?;
    if ds.is_empty() {
        return Err(CliError::Data(format!("{} contains no transitions", eval_data_path(data).display())));
    }
    Ok(ds)
}

fn mapped_primary(ctx: &Ctx) -> Result<Variant, CliError> {
    match ctx.cfg.primary()? {
        v @ Variant::Mapped(_) => Ok(v),
        v => Err(CliError::Usage(format!("primary variant {} has no mapper", v.label()))),
    }
}

fn primary_map(ctx: &Ctx, models: &Path, data: &Path) -> Result<(MapSnapshot, World), CliError> {
    let v = mapped_primary(ctx)?;
    let mapper = ModelDir::new(models).load_mapper(v)?;
    let ds = load_eval_data(data)?;
    let world = ctx.cfg.eval_world()?;
    let map = replay_map(&mapper, world.grid, &ds, ds.len())?;
    Ok((map.snapshot(), world))
}

fn write_map(snapshot: &MapSnapshot, out: &Path) -> Result<(), CliError> {
    let export = pca_export(snapshot)?;
    std::fs::create_dir_all(out)?;
    snapshot.write_csv(BufWriter::new(File::create(out.join(MAP_FILE))?))?;
    write_map_export(snapshot, &export, BufWriter::new(File::create(out.join(MAP_EXPORT_FILE))?))?;
    Ok(())
}

fn lap_rows(label: &str, seed: u64, m: &LapMetrics) -> Vec<MetricRow> {
    let row = |metric: &str, value: f64| MetricRow {
        metric: metric.into(),
        config: label.into(),
        seed,
        value,
    };
    vec![
        row("laps", m.laps as f64),
        row("lap_time_mean", m.lap_time.mean),
        row("lap_time_std", m.lap_time.std),
        row("cte_mean", m.cte.mean),
        row("cte_std", m.cte.std),
        row("violations_mean", m.boundary_violations.mean),
        row("violations_std", m.boundary_violations.std),
        row("interventions", m.interventions as f64),
    ]
}

fn eval(ctx: &Ctx, metric: MetricArg, models: PathBuf, data: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let dirs = ModelDir::new(&models);
    let world = ctx.cfg.eval_world()?;
    let row = |metric: String, config: String, value: f64| MetricRow {
        metric,
        config,
        seed: ctx.seed,
        value,
    };
    let mut rows = Vec::new();
    match metric {
        MetricArg::L2 => {
            let ds = load_eval_data(&data)?;
            let l2 = surface_mbrl::eval::L2Config {
                seed: ctx.seed,
                ..ctx.cfg.eval.l2.clone()
            };
            for v in ctx.cfg.variants()? {
                let model = dirs.load_variant(v)?;
                let map;
                let gt;
                let latents = match (&model.mapper, v) {
                    (Some(mapper), _) => {
                        map = surface_mbrl::gridmap::LatentMap::new(world.grid, model.ensemble.latent_dim())?;
                        L2Latents::Mapped { mapper, map: &map }
                    }
                    (None, Variant::GroundTruth) => {
                        gt = MaterialLatent(&world);
                        L2Latents::Fixed(&gt)
                    }
                    (None, _) => L2Latents::Blind,
                };
                for (n_s, value) in l2_metric(&model.ensemble, latents, &ds, &l2)? {
                    rows.push(row(format!("L2_{n_s}"), v.label(), value));
                }
                eprintln!("scored {}", v.label());
            }
        }
        MetricArg::Laps => {
            let ctrl = ctx.cfg.control(ctx.deterministic, ctx.seed);
            let d_b = ctx.cfg.reward.boundary(world.track.lane_half_width);
            std::fs::create_dir_all(out.join("runs"))?;
            let mut logs = Vec::new();
            for v in ctx.cfg.variants()? {
                let run = dirs.load_variant(v)?.race(&world, &ctrl)?;
                let m = lap_metrics(&run.log, world.path(), d_b)?;
                rows.extend(lap_rows(&v.label(), ctx.seed, &m));
                logs.push((v, run.log));
                eprintln!("raced {}", v.label());
            }
            for (v, log) in logs {
                log.write_csv(BufWriter::new(File::create(out.join("runs").join(format!("{}.csv", v.label())))?))?;
            }
        }
        MetricArg::Progressive => {
            let v = mapped_primary(ctx)?;
            let model = dirs.load_variant(v)?;
            let ctrl = surface_mbrl::planner::ControlConfig {
                laps: ctx.cfg.eval.progressive_laps,
                ..ctx.cfg.control(ctx.deterministic, ctx.seed)
            };
            let l2 = surface_mbrl::eval::L2Config {
                seed: ctx.seed,
                ..ctx.cfg.eval.l2.clone()
            };
            let n_s = l2.horizons[0];
            let mapper = model.mapper().expect("mapped variant has a mapper");
            for r in progressive_experiment(&world, &model.ensemble, mapper, &ctrl, &l2)? {
                rows.push(row(format!("progressive_L2_{n_s}_lap{}", r.lap), v.label(), r.l2));
                rows.push(row(format!("progressive_lap_time_lap{}", r.lap), v.label(), r.lap_time));
            }
        }
        MetricArg::Map => {
            let (snapshot, world) = primary_map(ctx, &models, &data)?;
            let s = map_structure(&snapshot, &world, ctx.seed)?;
            let label = ctx.cfg.primary.clone();
            rows.push(row("cluster_purity".into(), label.clone(), s.purity));
            rows.push(row("interior_cells".into(), label.clone(), s.interior_cells as f64));
            rows.push(row("boundary_cells".into(), label.clone(), s.boundary_cells as f64));
            rows.push(row("median_var_interior".into(), label.clone(), s.median_var_interior));
            rows.push(row("median_var_boundary".into(), label, s.median_var_boundary));
            write_map(&snapshot, &out)?;
        }
    }
    std::fs::create_dir_all(&out)?;
    append_metrics(&out.join(METRICS_FILE), &rows)?;
    for r in &rows {
        println!("{},{},{},{}", r.metric, r.config, r.seed, r.value);
    }
    ctx.manifest(&out, "eval")?;
    Ok(())
}

fn race(ctx: &Ctx, laps: Option<usize>, variant: Option<String>, models: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let v = match &variant {
        Some(label) => Variant::parse(label)?,
        None => ctx.cfg.primary()?,
    };
    let mut ctrl = ctx.cfg.control(ctx.deterministic, ctx.seed);
    if let Some(n) = laps {
        if n == 0 {
            return Err(CliError::Usage("--laps must be at least 1".into()));
        }
        ctrl.laps = n;
    }
    let world = ctx.cfg.eval_world()?;
    let model: VariantModel = ModelDir::new(&models).load_variant(v)?;
    let run = model.race(&world, &ctrl)?;
    std::fs::create_dir_all(&out)?;
    run.log.write_csv(BufWriter::new(File::create(out.join(RUN_LOG_FILE))?))?;
    if !run.completed {
        ctx.manifest(&out, "race")?;
        return Err(CliError::Numerical(format!(
            "{} finished {} of {} laps within {} s ({} interventions); partial log in {}",
            v.label(),
            run.lap_ends.len(),
            ctrl.laps,
            ctrl.max_time,
            run.interventions,
            out.join(RUN_LOG_FILE).display()
        )));
    }
    let m = lap_metrics(&run.log, world.path(), ctx.cfg.reward.boundary(world.track.lane_half_width))?;
    std::fs::write(out.join(LAP_METRICS_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
    ctx.manifest(&out, "race")?;
    println!("variant {} laps {} interventions {}", v.label(), m.laps, m.interventions);
    println!("lap time  {:.3} ± {:.3} s", m.lap_time.mean, m.lap_time.std);
    println!("cte       {:.3} ± {:.3} m", m.cte.mean, m.cte.std);
    println!("violations per lap {:.2} ± {:.2}", m.boundary_violations.mean, m.boundary_violations.std);
    Ok(())
}

/// Reads a run log written by `race`.
pub fn read_run_log(path: &Path) -> Result<RunLog, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(RunLog::read_csv(std::io::BufReader::new(file))?)
}
