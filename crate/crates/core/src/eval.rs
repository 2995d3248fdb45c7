//! Evaluation: multi-step prediction error with chronological map building,
//! closed-loop lap statistics, progressive mapping, and latent-map analysis.

use std::fs::OpenOptions;
use std::io::Write;
use std::ops::Range;
use std::path::Path as FsPath;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rollout_batch, rollout_rng, DynamicsError, Ensemble, LatentSource, NoLatent, RolloutStart};
use crate::gridmap::{CellIndex, GridSpec, LatentMap, MapError, MapSnapshot};
use crate::mapper::{aggregate_traversal, CellMapper, MapperError};
use crate::planner::control::apply_traversal;
use crate::planner::{control_loop, ControlConfig, PlanError, RunLog};
use crate::sim::dataset::TRANSITION_DT;
use crate::sim::{Dataset, Path, Pose2, World};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("no start state has {0} contiguous future steps")]
    EmptyData(usize),
    #[error("run log contains no completed lap")]
    NoLaps,
    #[error("need at least 2 visited cells, got {0}")]
    TooFewCells(usize),
    #[error("a rollout produced non-finite states")]
    NonFinite,
    #[error("invalid evaluation configuration: {0}")]
    Config(String),
    #[error("metrics csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2Config {
    /// Prediction horizons N_s.
    pub horizons: Vec<usize>,
    /// Hypotheses N_H per start state.
    pub hypotheses: usize,
    /// Update the map from each traversal once it has been passed.
    pub chronological: bool,
    pub seed: u64,
}

impl Default for L2Config {
    fn default() -> Self {
        Self {
            horizons: vec![10, 20, 30],
            hypotheses: 100,
            chronological: true,
            seed: 0,
        }
    }
}

impl L2Config {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.horizons.is_empty() || self.horizons.contains(&0) || self.hypotheses == 0 {
            return Err(EvalError::Config("horizons and hypotheses must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where rollouts read their latents from.
pub enum L2Latents<'a> {
    /// Latent-blind model.
    Blind,
    /// A fixed source such as a frozen map or ground-truth materials.
    Fixed(&'a dyn LatentSource),
    /// A map that the mapper grows from the test data, in order.
    Mapped { mapper: &'a dyn CellMapper, map: &'a LatentMap },
}

/// Number of transitions from each index onward that continue without a
/// pose discontinuity.
pub fn contiguous_run(data: &Dataset) -> Vec<usize> {
    let tr = &data.transitions;
    let mut run = vec![0; tr.len()];
    for i in (0..tr.len()).rev() {
        let continues = i + 1 < tr.len() && {
            let (a, b) = (tr[i].end_pose(), tr[i + 1].pose);
            (a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6
        };
        run[i] = 1 + if continues { run[i + 1] } else { 0 };
    }
    run
}

/// Sum over the first `n_s` points of the distances between a hypothesis and
/// the ground truth.
pub fn hypothesis_error(hyp: &[Pose2], truth: &[Pose2], n_s: usize) -> f64 {
    hyp[..n_s].iter().zip(&truth[..n_s]).map(|(h, t)| (h.x - t.x).hypot(h.y - t.y)).sum()
}

/// Mean Euclidean error of `hypotheses[start][h]` against `truths[start]`,
/// normalized by start states, hypotheses and horizon.
pub fn mean_l2(hypotheses: &[Vec<Vec<Pose2>>], truths: &[Vec<Pose2>], n_s: usize) -> f64 {
    let n_h = hypotheses.first().map_or(0, Vec::len);
    let sum: f64 = hypotheses
        .iter()
        .zip(truths)
        .flat_map(|(hs, t)| hs.iter().map(move |h| hypothesis_error(h, t, n_s)))
        .sum();
    sum / (hypotheses.len() * n_h * n_s) as f64
}

/// Multi-step prediction error for each horizon in `cfg.horizons`, as
/// `(N_s, L2)` pairs. Start states are all transitions with at least `N_s`
/// contiguous future steps. With [`L2Latents::Mapped`] and
/// `cfg.chronological`, each traversal updates the map once the data has
/// moved past it, so no prediction sees its own future.
pub fn l2_metric(ens: &Ensemble, latents: L2Latents<'_>, data: &Dataset, cfg: &L2Config) -> Result<Vec<(usize, f64)>, EvalError> {
    cfg.validate()?;
    let n = data.len();
    let max_h = *cfg.horizons.iter().max().expect("validated");
    let min_h = *cfg.horizons.iter().min().expect("validated");
    let run = contiguous_run(data);
    let ranges = data.traversal_ranges();
    let mut sums = vec![0.0; cfg.horizons.len()];
    let mut counts = vec![0usize; cfg.horizons.len()];
    let mut next_traversal = 0;
    let mut i = 0;
    while i < n {
        let end = match &latents {
            L2Latents::Mapped { mapper, map } => {
                while next_traversal < ranges.len() && ranges[next_traversal].end <= i {
                    if cfg.chronological {
                        let r = &ranges[next_traversal];
                        let sensors = aggregate_traversal(&data.transitions[r.clone()])?;
                        apply_traversal(*mapper, map, data.transitions[r.start].cell, sensors)?;
                    }
                    next_traversal += 1;
                }
                ranges.get(next_traversal).map_or(n, |r| r.end)
            }
            _ => (i + 64).min(n),
        };
        let starts: Vec<usize> = (i..end).filter(|&s| run[s] >= min_h).collect();
        if !starts.is_empty() {
            let snapshot;
            let source: &dyn LatentSource = match &latents {
                L2Latents::Blind => &NoLatent,
                L2Latents::Fixed(s) => *s,
                L2Latents::Mapped { map, .. } => {
                    snapshot = map.snapshot();
                    &snapshot
                }
            };
            score_group(ens, source, data, &starts, &run, max_h, cfg, &mut sums, &mut counts)?;
        }
        i = end;
    }
    let mut out = Vec::with_capacity(cfg.horizons.len());
    for (j, &h) in cfg.horizons.iter().enumerate() {
        if counts[j] == 0 {
            return Err(EvalError::EmptyData(h));
        }
        out.push((h, sums[j] / (counts[j] * cfg.hypotheses * h) as f64));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn score_group(
    ens: &Ensemble,
    source: &dyn LatentSource,
    data: &Dataset,
    starts: &[usize],
    run: &[usize],
    horizon: usize,
    cfg: &L2Config,
    sums: &mut [f64],
    counts: &mut [usize],
) -> Result<(), EvalError> {
    let tr = &data.transitions;
    let n_h = cfg.hypotheses;
    let mut rs = Vec::with_capacity(starts.len() * n_h);
    let mut rngs = Vec::with_capacity(starts.len() * n_h);
    for &s in starts {
        for h in 0..n_h {
            rs.push(RolloutStart {
                s_in: tr[s].s_in,
                pose: tr[s].pose,
            });
            rngs.push(rollout_rng(cfg.seed, (s * n_h + h) as u64));
        }
    }
    // Past the contiguous run the last available action is repeated; those
    // steps never enter a horizon the start qualifies for.
    let action = |r: usize, t: usize| {
        let s = starts[r / n_h];
        tr[s + t.min(run[s] - 1)].action
    };
    let trajs = rollout_batch(ens, &rs, horizon, action, source, &mut rngs)?;
    for (gi, &s) in starts.iter().enumerate() {
        let truth: Vec<Pose2> = (0..run[s].min(horizon)).map(|t| tr[s + t].end_pose()).collect();
        for (j, &n_s) in cfg.horizons.iter().enumerate() {
            if run[s] < n_s {
                continue;
            }
            counts[j] += 1;
            for traj in &trajs[gi * n_h..(gi + 1) * n_h] {
                if !traj.valid {
                    return Err(EvalError::NonFinite);
                }
                sums[j] += hypothesis_error(&traj.poses, &truth, n_s);
            }
        }
    }
    Ok(())
}

/// Replays the traversals of `data` that end at or before `upto` into a
/// fresh map.
pub fn replay_map(mapper: &dyn CellMapper, grid: GridSpec, data: &Dataset, upto: usize) -> Result<LatentMap, EvalError> {
    let map = LatentMap::new(grid, mapper.latent_dim())?;
    for r in data.traversal_ranges().into_iter().take_while(|r| r.end <= upto) {
        let sensors = aggregate_traversal(&data.transitions[r.clone()])?;
        apply_traversal(mapper, &map, data.transitions[r.start].cell, sensors)?;
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation; zeros when empty.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapMetrics {
    pub laps: usize,
    /// Seconds per lap.
    pub lap_time: MeanStd,
    /// Meters, over every sample inside a completed lap.
    pub cte: MeanStd,
    /// Samples beyond the boundary distance, per lap.
    pub boundary_violations: MeanStd,
    pub interventions: usize,
}

/// Row ranges of the completed laps in `log`.
pub fn lap_ranges(log: &RunLog) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut lap = 0;
    for (i, r) in log.rows.iter().enumerate() {
        if r.lap > lap {
            out.push(start..i + 1);
            start = i + 1;
            lap = r.lap;
        }
    }
    out
}

/// Per-lap statistics of a run. Samples after the last completed lap are
/// ignored.
pub fn lap_metrics(log: &RunLog, path: &Path, d_b: f64) -> Result<LapMetrics, EvalError> {
    let laps = lap_ranges(log);
    if laps.is_empty() {
        return Err(EvalError::NoLaps);
    }
    let mut times = Vec::with_capacity(laps.len());
    let mut violations = Vec::with_capacity(laps.len());
    let mut cte = Vec::new();
    let mut t0 = 0.0;
    for r in &laps {
        let rows = &log.rows[r.clone()];
        let t1 = rows.last().expect("laps are non-empty").t;
        times.push(t1 - t0);
        t0 = t1;
        let mut v = 0usize;
        for row in rows {
            let d = path.project(row.x, row.y).distance;
            cte.push(d);
            v += usize::from(d > d_b);
        }
        violations.push(v as f64);
    }
    Ok(LapMetrics {
        laps: laps.len(),
        lap_time: MeanStd::of(&times),
        cte: MeanStd::of(&cte),
        boundary_violations: MeanStd::of(&violations),
        interventions: log.rows.iter().filter(|r| r.intervention != 0).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveRow {
    pub lap: usize,
    pub lap_time: f64,
    /// L2 over the whole run with the map frozen after this lap.
    pub l2: f64,
}

/// Drives `ctrl.laps` laps while mapping, then for every lap `m` freezes the
/// map built from laps `1..=m` and scores the whole run with it at the first
/// horizon of `l2`.
pub fn progressive_experiment(
    world: &World,
    ens: &Ensemble,
    mapper: &dyn CellMapper,
    ctrl: &ControlConfig,
    l2: &L2Config,
) -> Result<Vec<ProgressiveRow>, EvalError> {
    l2.validate()?;
    let live = LatentMap::new(world.grid, mapper.latent_dim())?;
    let run = control_loop(world, ens, Some(mapper), &live, ctrl)?;
    let frozen_cfg = L2Config {
        horizons: vec![l2.horizons[0]],
        chronological: false,
        ..l2.clone()
    };
    let mut rows = Vec::with_capacity(run.lap_ends.len());
    let mut prev_end = 0;
    for (m, &end) in run.lap_ends.iter().enumerate() {
        let map = replay_map(mapper, world.grid, &run.transitions, end)?;
        let snapshot = map.snapshot();
        let err = l2_metric(ens, L2Latents::Fixed(&snapshot), &run.transitions, &frozen_cfg)?;
        rows.push(ProgressiveRow {
            lap: m + 1,
            lap_time: (end - prev_end) as f64 * TRANSITION_DT,
            l2: err[0].1,
        });
        prev_end = end;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pc1 {
    pub mean: Vec<f64>,
    /// Unit first principal direction, zero when the points do not vary.
    pub direction: Vec<f64>,
    pub eigenvalue: f64,
}

impl Pc1 {
    pub fn project(&self, p: &[f64]) -> f64 {
        p.iter().zip(&self.mean).zip(&self.direction).map(|((x, m), d)| (x - m) * d).sum()
    }
}

/// Sample covariance (divided by n) of `points`.
pub fn covariance(points: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let k = points[0].len();
    let n = points.len() as f64;
    let mut mean = vec![0.0; k];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n;
        }
    }
    let mut cov = DMatrix::zeros(k, k);
    for p in points {
        for a in 0..k {
            for b in 0..k {
                cov[(a, b)] += (p[a] - mean[a]) * (p[b] - mean[b]) / n;
            }
        }
    }
    (mean, cov)
}

/// First principal component via covariance eigendecomposition. The sign
/// makes the largest-magnitude entry positive.
pub fn first_component(points: &[Vec<f64>]) -> Result<Pc1, EvalError> {
    if points.len() < 2 {
        return Err(EvalError::TooFewCells(points.len()));
    }
    let (mean, cov) = covariance(points);
    let k = mean.len();
    let eig = SymmetricEigen::new(cov);
    let top = (0..k).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).expect("k >= 1");
    let eigenvalue = eig.eigenvalues[top];
    let scale = points.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if eigenvalue <= 1e-12 * scale * scale {
        return Ok(Pc1 {
            mean,
            direction: vec![0.0; k],
            eigenvalue: 0.0,
        });
    }
    let mut direction: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let lead = direction.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    if lead < 0.0 {
        direction.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(Pc1 { mean, direction, eigenvalue })
}

/// Per-cell PC1 projection and mean predicted variance; `None` for
/// unvisited cells. Indexed by linear cell index.
#[derive(Clone, Debug)]
pub struct MapExport {
    pub pc1: Pc1,
    pub projection: Vec<Option<f64>>,
    pub variance: Vec<Option<f64>>,
}

pub fn mean_variance(log_var: &[f64]) -> f64 {
    log_var.iter().map(|v| v.exp()).sum::<f64>() / log_var.len().max(1) as f64
}

pub fn pca_export(snapshot: &MapSnapshot) -> Result<MapExport, EvalError> {
    let n = snapshot.spec().num_cells();
    let visited: Vec<(CellIndex, Vec<f64>, f64)> = snapshot
        .cells()
        .filter(|(_, c)| c.visited)
        .map(|(i, c)| (i, c.mean.clone(), mean_variance(&c.log_var)))
        .collect();
    let points: Vec<Vec<f64>> = visited.iter().map(|v| v.1.clone()).collect();
    let pc1 = first_component(&points)?;
    let mut projection = vec![None; n];
    let mut variance = vec![None; n];
    for (c, mean, var) in &visited {
        let i = snapshot.spec().linear(*c).expect("cells come from the grid");
        projection[i] = Some(pc1.project(mean));
        variance[i] = Some(*var);
    }
    Ok(MapExport { pc1, projection, variance })
}

/// Writes the map CSV with `pc1` and `var` columns, NaN for unvisited cells.
pub fn write_map_export<W: Write>(snapshot: &MapSnapshot, export: &MapExport, w: W) -> Result<(), EvalError> {
    let spec = *snapshot.spec();
    snapshot.write_csv_with(w, &["pc1", "var"], |c, _| {
        let i = spec.linear(c).expect("cells come from the grid");
        vec![export.projection[i].unwrap_or(f64::NAN), export.variance[i].unwrap_or(f64::NAN)]
    })?;
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding; the best of `restarts` runs by
/// inertia. Returns the cluster of each point.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k <= 1 {
        return vec![0; n];
    }
    let mut best = (f64::INFINITY, vec![0; n]);
    for _ in 0..restarts.max(1) {
        let mut centers = vec![points[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                d.iter()
                    .position(|&di| {
                        u -= di;
                        u <= 0.0
                    })
                    .unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            centers.push(points[next].clone());
        }
        let mut assign = vec![usize::MAX; n];
        for _ in 0..200 {
            let mut changed = false;
            for (a, p) in assign.iter_mut().zip(points) {
                let c = (0..k).min_by(|&x, &y| sq_dist(p, &centers[x]).total_cmp(&sq_dist(p, &centers[y]))).expect("k >= 2");
                changed |= *a != c;
                *a = c;
            }
            if !changed {
                break;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (d, v) in center.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
        if inertia < best.0 {
            best = (inertia, assign);
        }
    }
    best.1
}

/// Fraction of points whose cluster's majority label equals their own.
pub fn purity(clusters: &[usize], labels: &[u32]) -> f64 {
    if clusters.is_empty() {
        return 1.0;
    }
    let mut by_cluster: std::collections::BTreeMap<usize, std::collections::BTreeMap<u32, usize>> = Default::default();
    for (&c, &l) in clusters.iter().zip(labels) {
        *by_cluster.entry(c).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = by_cluster.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / clusters.len() as f64
}

/// k-means purity of `points` against `labels`, with k the number of
/// distinct labels.
pub fn cluster_purity(points: &[Vec<f64>], labels: &[u32], seed: u64) -> f64 {
    let k = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    let clusters = kmeans(points, k, 10, &mut ChaCha8Rng::seed_from_u64(seed));
    purity(&clusters, labels)
}

/// True when a cell's 8-neighborhood holds a different material.
pub fn boundary_adjacent(world: &World, c: CellIndex) -> bool {
    let own = world.track.material_at_cell(c);
    (-1..=1).any(|dr| {
        (-1..=1).any(|dc| {
            let n = CellIndex::new(c.col + dc, c.row + dr);
            world.grid.contains(n) && world.track.material_at_cell(n) != own
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapStructure {
    /// k-means purity over visited interior cells.
    pub purity: f64,
    pub interior_cells: usize,
    pub boundary_cells: usize,
    pub median_var_interior: f64,
    pub median_var_boundary: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// Material purity and boundary variance statistics of a built map against
/// the world's layout.
pub fn map_structure(snapshot: &MapSnapshot, world: &World, seed: u64) -> Result<MapStructure, EvalError> {
    let mut interior = Vec::new();
    let mut labels = Vec::new();
    let mut var_interior = Vec::new();
    let mut var_boundary = Vec::new();
    for (c, cell) in snapshot.cells().filter(|(_, c)| c.visited) {
        let var = mean_variance(&cell.log_var);
        if boundary_adjacent(world, c) {
            var_boundary.push(var);
        } else {
            interior.push(cell.mean.clone());
            labels.push(world.track.material_at_cell(c));
            var_interior.push(var);
        }
    }
    if interior.len() < 2 {
        return Err(EvalError::TooFewCells(interior.len()));
    }
    Ok(MapStructure {
        purity: cluster_purity(&interior, &labels, seed),
        interior_cells: interior.len(),
        boundary_cells: var_boundary.len(),
        median_var_interior: median(var_interior),
        median_var_boundary: median(var_boundary),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub config: String,
    pub seed: u64,
    pub value: f64,
}

/// Appends rows to a `metric,config,seed,value` CSV, writing the header when
/// the file is new or empty.
pub fn append_metrics(path: &FsPath, rows: &[MetricRow]) -> Result<(), EvalError> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut wtr = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        wtr.serialize(r).map_err(|e| EvalError::Csv(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Mean purity of `clusters` against `draws` random permutations of
/// `labels`: the chance level for unrelated clusters.
pub fn chance_purity<R: Rng + ?Sized>(clusters: &[usize], labels: &[u32], draws: usize, rng: &mut R) -> f64 {
    let mut l = labels.to_vec();
    (0..draws)
        .map(|_| {
            l.shuffle(rng);
            purity(clusters, &l)
        })
        .sum::<f64>()
        / draws as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{EnsembleSpec, Normalizer};
    use crate::gridmap::GridSpec;
    use crate::planner::RunLogRow;
    use rand_distr::StandardNormal;

    fn pose(x: f64, y: f64) -> Pose2 {
        Pose2 { x, y, yaw: 0.0 }
    }

    #[test]
    fn constant_offset_gives_offset() {
        let truth: Vec<Vec<Pose2>> = (0..3).map(|s| (0..5).map(|t| pose(s as f64, t as f64)).collect()).collect();
        let d = 0.37;
        let hyps: Vec<Vec<Vec<Pose2>>> = truth
            .iter()
            .map(|t| {
                (0..4)
                    .map(|h| {
                        let a = h as f64;
                        t.iter().map(|p| pose(p.x + d * a.cos(), p.y + d * a.sin())).collect()
                    })
                    .collect()
            })
            .collect();
        assert!((mean_l2(&hyps, &truth, 5) - d).abs() < 1e-12);
        let same: Vec<Vec<Vec<Pose2>>> = truth.iter().map(|t| vec![t.clone(); 2]).collect();
        assert_eq!(mean_l2(&same, &truth, 3), 0.0);
    }

    #[test]
    fn error_grows_with_hypothesis_noise() {
        let truth: Vec<Vec<Pose2>> = (0..20).map(|s| (0..10).map(|t| pose(s as f64 * 0.1, t as f64 * 0.2)).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base_hyps = |rng: &mut ChaCha8Rng, sigma: f64, base: &Vec<Vec<Vec<(f64, f64)>>>| -> Vec<Vec<Vec<Pose2>>> {
            base.iter()
                .zip(&truth)
                .map(|(hs, t)| {
                    hs.iter()
                        .map(|h| {
                            h.iter()
                                .zip(t)
                                .map(|(o, p)| {
                                    let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                                    pose(p.x + o.0 + sigma * a, p.y + o.1 + sigma * b)
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        for seed in 0..10u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let offsets: Vec<Vec<Vec<(f64, f64)>>> = (0..20)
                .map(|_| (0..5).map(|_| (0..10).map(|_| (0.1 * r.sample::<f64, _>(StandardNormal), 0.0)).collect()).collect())
                .collect();
            let clean = base_hyps(&mut rng, 0.0, &offsets);
            let noisy = base_hyps(&mut rng, 0.2, &offsets);
            assert!(mean_l2(&noisy, &truth, 10) > mean_l2(&clean, &truth, 10), "seed {seed}");
        }
    }

    fn test_data(secs: f64, seed: u64) -> (World, Dataset) {
        let w = World::held_out();
        let d = crate::sim::collect_dataset(&w, secs, seed).unwrap();
        (w, d)
    }

    fn small_ensemble(k: usize) -> Ensemble {
        let spec = EnsembleSpec {
            members: 3,
            hidden_dims: vec![8],
            latent_dim: k,
        };
        Ensemble::new(spec, Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn l2_matches_brute_force_sum() {
        let (_, data) = test_data(3.0, 4);
        let micro = Dataset {
            transitions: data.transitions[..5].to_vec(),
        };
        assert!(contiguous_run(&micro)[0] == 5);
        let ens = small_ensemble(0);
        let cfg = L2Config {
            horizons: vec![2, 3],
            hypotheses: 4,
            chronological: true,
            seed: 8,
        };
        let got = l2_metric(&ens, L2Latents::Blind, &micro, &cfg).unwrap();
        for (n_s, value) in got {
            // Starts with n_s future steps: indices 0..=5-n_s.
            let n_d = 5 - n_s + 1;
            let mut sum = 0.0;
            for s in 0..n_d {
                let actions: Vec<_> = (0..n_s).map(|t| micro.transitions[s + t].action).collect();
                for h in 0..cfg.hypotheses {
                    let mut rng = rollout_rng(cfg.seed, (s * cfg.hypotheses + h) as u64);
                    let start = RolloutStart {
                        s_in: micro.transitions[s].s_in,
                        pose: micro.transitions[s].pose,
                    };
                    let traj = crate::dynamics::ts1_rollout(&ens, start, &actions, &NoLatent, &mut rng).unwrap();
                    for n in 0..n_s {
                        let p = traj.poses[n];
                        let q = micro.transitions[s + n].end_pose();
                        sum += ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
                    }
                }
            }
            let want = sum / (n_d * cfg.hypotheses * n_s) as f64;
            assert!((value - want).abs() < 1e-12, "N_s={n_s}: {value} vs {want}");
        }
    }

    #[test]
    fn too_short_data_is_an_error() {
        let (_, data) = test_data(1.0, 0);
        let cfg = L2Config {
            horizons: vec![30],
            hypotheses: 2,
            ..Default::default()
        };
        assert!(matches!(l2_metric(&small_ensemble(0), L2Latents::Blind, &data, &cfg), Err(EvalError::EmptyData(30))));
    }

    #[test]
    fn frozen_map_path_equals_fixed_snapshot() {
        let (w, data) = test_data(4.0, 2);
        let ens = small_ensemble(2);
        let map = LatentMap::new(w.grid, 2).unwrap();
        let mapper = crate::mapper::MaterialMapper { track: w.track.clone() };
        let cfg = L2Config {
            horizons: vec![5],
            hypotheses: 3,
            chronological: false,
            seed: 1,
        };
        let mapper2 = TwoDim(mapper);
        let a = l2_metric(&ens, L2Latents::Mapped { mapper: &mapper2, map: &map }, &data, &cfg).unwrap();
        assert_eq!(map.version(), 0);
        let empty = map.snapshot();
        let b = l2_metric(&ens, L2Latents::Fixed(&empty), &data, &cfg).unwrap();
        assert_eq!(a, b);
        // Chronological mode grows the map and changes the result.
        let c = l2_metric(
            &ens,
            L2Latents::Mapped { mapper: &mapper2, map: &map },
            &data,
            &L2Config {
                chronological: true,
                ..cfg
            },
        )
        .unwrap();
        assert!(map.version() > 0);
        assert_ne!(a, c);
    }

    /// Material mapper widened to two latent dimensions.
    struct TwoDim(crate::mapper::MaterialMapper);

    impl CellMapper for TwoDim {
        fn latent_dim(&self) -> usize {
            2
        }
        fn update_batch(
            &self,
            items: &[(CellIndex, crate::mapper::MapperInput)],
        ) -> Result<Vec<crate::mapper::MapperOutput>, MapperError> {
            let mut out = self.0.update_batch(items)?;
            for o in &mut out {
                o.mean.push(-o.mean[0]);
                o.log_var.push(o.log_var[0]);
            }
            Ok(out)
        }
    }

    #[test]
    fn chronological_map_never_sees_the_future() {
        let (w, data) = test_data(4.0, 6);
        let mapper = TwoDim(crate::mapper::MaterialMapper { track: w.track.clone() });
        let ens = small_ensemble(2);
        let map = LatentMap::new(w.grid, 2).unwrap();
        let cfg = L2Config {
            horizons: vec![3],
            hypotheses: 2,
            chronological: true,
            seed: 0,
        };
        l2_metric(&ens, L2Latents::Mapped { mapper: &mapper, map: &map }, &data, &cfg).unwrap();
        // Only traversals that end before the last start state are folded in.
        let ranges = data.traversal_ranges();
        let last_start = data.len() - 3;
        let expected = ranges.iter().filter(|r| r.end <= last_start).count();
        assert_eq!(map.version() as usize, expected);
        let replayed = replay_map(&mapper, w.grid, &data, last_start).unwrap();
        assert_eq!(replayed.snapshot().cells().filter(|c| c.1.visited).count(), map.snapshot().cells().filter(|c| c.1.visited).count());
    }

    fn square() -> Path {
        Path::new(&[(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)]).unwrap()
    }

    fn row(t: f64, x: f64, y: f64, lap: usize) -> RunLogRow {
        RunLogRow {
            t,
            x,
            y,
            yaw: 0.0,
            vx: 0.0,
            vy: 0.0,
            yaw_rate: 0.0,
            a_th: 0.0,
            a_st: 0.0,
            reward: 0.0,
            lap,
            map_version: 0,
            intervention: 0,
        }
    }

    #[test]
    fn perfect_following_lap_metrics() {
        let p = square();
        let v = 2.0;
        let steps_per_lap = 200;
        let mut log = RunLog::default();
        for i in 1..=(2 * steps_per_lap + 50) {
            let s = (v * i as f64 * 0.1).rem_euclid(p.length());
            let ((x, y), _) = p.point_at(s);
            log.rows.push(row(i as f64 * 0.1, x, y, i / steps_per_lap));
        }
        let m = lap_metrics(&log, &p, 0.6).unwrap();
        assert_eq!(m.laps, 2);
        assert!((m.lap_time.mean - p.length() / v).abs() < 1e-9);
        assert!(m.lap_time.std < 1e-9);
        assert!(m.cte.mean < 1e-9);
        assert_eq!(m.boundary_violations.mean, 0.0);
        assert_eq!(m.interventions, 0);
    }

    #[test]
    fn one_sample_outside_counts_once() {
        let p = square();
        let mut log = RunLog::default();
        log.rows.push(row(0.1, 5.0, 0.0, 0));
        log.rows.push(row(0.2, 5.0, 0.6 + 1e-6, 0));
        log.rows.push(row(0.3, 5.0, 0.6, 1));
        let m = lap_metrics(&log, &p, 0.6).unwrap();
        assert_eq!(m.boundary_violations.mean, 1.0);
        assert!(matches!(lap_metrics(&RunLog::default(), &p, 0.6), Err(EvalError::NoLaps)));
    }

    fn power_iteration(points: &[Vec<f64>]) -> Vec<f64> {
        let k = points[0].len();
        let n = points.len() as f64;
        let mean: Vec<f64> = (0..k).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n).collect();
        let mut v: Vec<f64> = (0..k).map(|i| 1.0 + i as f64).collect();
        for _ in 0..5000 {
            let mut w = vec![0.0; k];
            for p in points {
                let dot: f64 = (0..k).map(|d| (p[d] - mean[d]) * v[d]).sum();
                for d in 0..k {
                    w[d] += (p[d] - mean[d]) * dot / n;
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.into_iter().map(|x| x / norm).collect();
        }
        v
    }

    #[test]
    fn pc1_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scales = [3.0, 1.5, 0.7, 0.3];
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let z: Vec<f64> = scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
                // Rotate so the principal axis is not a coordinate axis.
                vec![z[0] + z[1], z[0] - z[1], z[2] + 0.5 * z[0], z[3]]
            })
            .collect();
        let pc = first_component(&points).unwrap();
        let oracle = power_iteration(&points);
        let dot: f64 = pc.direction.iter().zip(&oracle).map(|(a, b)| a * b).sum();
        for (a, b) in pc.direction.iter().zip(&oracle) {
            assert!((a - dot.signum() * b).abs() < 1e-6, "{:?} vs {:?}", pc.direction, oracle);
        }
        let lead = pc.direction.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(lead > 0.0);
    }

    #[test]
    fn pc1_separates_clusters_and_handles_constants() {
        let points: Vec<Vec<f64>> = (0..20).map(|i| vec![if i < 10 { -2.0 } else { 2.0 }, 0.01 * (i % 3) as f64]).collect();
        let pc = first_component(&points).unwrap();
        let a = pc.project(&points[0]);
        let b = pc.project(&points[15]);
        assert!(a * b < 0.0);
        let same = vec![vec![0.4, -1.0]; 5];
        let pc = first_component(&same).unwrap();
        assert!(same.iter().all(|p| pc.project(p) == 0.0));
        assert!(matches!(first_component(&same[..1]), Err(EvalError::TooFewCells(1))));
    }

    #[test]
    fn map_export_has_pc1_and_var_columns() {
        let grid = GridSpec::new(0.0, 0.0, 1.0, 3, 2).unwrap();
        let map = LatentMap::new(grid, 2).unwrap();
        map.apply_update(CellIndex::new(0, 0), &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        map.apply_update(CellIndex::new(2, 1), &[-1.0, 0.0], &[(2.0f64).ln(), (2.0f64).ln()]).unwrap();
        let snap = map.snapshot();
        let ex = pca_export(&snap).unwrap();
        assert_eq!(ex.projection.iter().filter(|p| p.is_some()).count(), 2);
        assert!((ex.variance[grid.linear(CellIndex::new(2, 1)).unwrap()].unwrap() - 2.0).abs() < 1e-12);
        let mut buf = Vec::new();
        write_map_export(&snap, &ex, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().ends_with(",pc1,var"));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn purity_examples() {
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let onehot: Vec<Vec<f64>> = labels.iter().map(|&l| (0..3).map(|d| f64::from(u8::from(d == l))).collect()).collect();
        assert_eq!(cluster_purity(&onehot, &labels, 0), 1.0);
        let single = vec![7u32; 12];
        let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64]).collect();
        assert_eq!(cluster_purity(&pts, &single, 0), 1.0);
    }

    #[test]
    fn random_latents_give_chance_purity() {
        let labels: Vec<u32> = (0..60).map(|i| (i % 3) as u32).collect();
        let mut got = 0.0;
        let mut chance = 0.0;
        let seeds = 30;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let pts: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let clusters = kmeans(&pts, 3, 10, &mut rng);
            got += purity(&clusters, &labels);
            chance += chance_purity(&clusters, &labels, 200, &mut rng);
        }
        let (got, chance) = (got / seeds as f64, chance / seeds as f64);
        assert!(chance > 1.0 / 3.0);
        assert!((got - chance).abs() < 0.03, "purity {got} vs chance {chance}");
    }

    #[test]
    fn boundary_cells_touch_another_material() {
        let w = World::held_out();
        let mut seen = (false, false);
        for i in 0..w.grid.num_cells() {
            let c = w.grid.cell_at(i);
            let own = w.track.material_at_cell(c);
            let b = boundary_adjacent(&w, c);
            let right = CellIndex::new(c.col + 1, c.row);
            if w.grid.contains(right) && w.track.material_at_cell(right) != own {
                assert!(b);
            }
            if b {
                seen.0 = true;
            } else {
                seen.1 = true;
            }
        }
        assert!(seen.0 && seen.1);
    }

    #[test]
    fn metrics_csv_appends_with_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        let r = MetricRow {
            metric: "l2_30".into(),
            config: "AIS".into(),
            seed: 1,
            value: 0.25,
        };
        append_metrics(&p, std::slice::from_ref(&r)).unwrap();
        append_metrics(&p, &[r]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "metric,config,seed,value\nl2_30,AIS,1,0.25\nl2_30,AIS,1,0.25\n");
    }
}
