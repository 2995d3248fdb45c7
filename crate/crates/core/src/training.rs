//! Cell-grouped datasets and the three-stage optimization of dynamics,
//! directly optimized cell latents and the mapper.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path as FsPath;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, Ensemble, EnsembleSpec, Normalizer, BASE_INPUT_DIM};
use crate::gridmap::{CellIndex, GridSpec, MapError};
use crate::mapper::{CellMapper, HistoryNorm, Mapper, MapperError, MapperInput, MapperOutput, MapperSpec, MaterialMapper, PrevLatent};
use crate::nn::{self, Adam, Graph, NnError, ParamOwner, ParamStore, Tensor, Var};
use crate::sim::dataset::OUTPUT_DIM;
use crate::sim::{Dataset, SensorBundle, TrackSpec, Transition};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("training data is empty")]
    EmptyData,
    #[error("cell group has no traversals")]
    EmptyGroup,
    #[error("map {map}: transition at t={t} starts outside the grid ({col}, {row})")]
    OffGrid { map: usize, t: f64, col: i64, row: i64 },
    #[error("stage {stage} diverged at epoch {epoch}: {what} is not finite")]
    Diverged { stage: u8, epoch: usize, what: &'static str },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training log: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One pass of the vehicle through a cell.
#[derive(Clone, Debug)]
pub struct Traversal {
    /// Indices into [`CellGroupedDataset::transitions`], chronological.
    pub transitions: Vec<usize>,
    /// Representative sensors handed to the mapper.
    pub sensors: SensorBundle,
}

#[derive(Clone, Debug)]
pub struct CellGroup {
    pub map_id: usize,
    pub cell: CellIndex,
    /// Row of this cell in the dense latent table.
    pub slot: usize,
    /// Chronological; the loss treats them as unordered.
    pub traversals: Vec<Traversal>,
}

#[derive(Clone, Debug)]
pub struct CellGroupedDataset {
    pub grids: Vec<GridSpec>,
    /// First latent-table row of each map.
    pub slot_offsets: Vec<usize>,
    pub transitions: Vec<Transition>,
    /// Map id of each transition.
    pub transition_map: Vec<usize>,
    pub groups: Vec<CellGroup>,
}

impl CellGroupedDataset {
    pub fn num_slots(&self) -> usize {
        self.slot_offsets.last().copied().unwrap_or(0) + self.grids.last().map_or(0, GridSpec::num_cells)
    }

    pub fn num_traversals(&self) -> usize {
        self.groups.iter().map(|g| g.traversals.len()).sum()
    }

    /// 4-neighbor pairs of latent-table rows within each map.
    pub fn neighbor_slots(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (grid, off) in self.grids.iter().zip(&self.slot_offsets) {
            out.extend(grid.neighbor_pairs().into_iter().map(|(a, b)| (a + off, b + off)));
        }
        out
    }
}

/// Partitions each map's transitions into per-cell traversals.
pub fn group_by_cell(maps: &[(GridSpec, &Dataset)]) -> Result<CellGroupedDataset, TrainError> {
    if maps.iter().all(|(_, d)| d.is_empty()) {
        return Err(TrainError::EmptyData);
    }
    let mut grids = Vec::new();
    let mut slot_offsets = Vec::new();
    let mut transitions = Vec::new();
    let mut transition_map = Vec::new();
    let mut groups: Vec<CellGroup> = Vec::new();
    let mut next_slot = 0;
    for (map_id, (grid, ds)) in maps.iter().enumerate() {
        grids.push(*grid);
        slot_offsets.push(next_slot);
        let mut by_cell: BTreeMap<usize, usize> = BTreeMap::new();
        for range in ds.traversal_ranges() {
            let base = transitions.len();
            let first = &ds.transitions[range.start];
            let linear = grid.linear(first.cell).ok_or(TrainError::OffGrid {
                map: map_id,
                t: first.t,
                col: first.cell.col,
                row: first.cell.row,
            })?;
            let sensors = crate::mapper::aggregate_traversal(&ds.transitions[range.clone()])?;
            transitions.extend(ds.transitions[range.clone()].iter().cloned());
            transition_map.extend(std::iter::repeat_n(map_id, range.len()));
            let traversal = Traversal {
                transitions: (base..base + range.len()).collect(),
                sensors,
            };
            let gi = *by_cell.entry(linear).or_insert_with(|| {
                groups.push(CellGroup {
                    map_id,
                    cell: first.cell,
                    slot: next_slot + linear,
                    traversals: Vec::new(),
                });
                groups.len() - 1
            });
            groups[gi].traversals.push(traversal);
        }
        next_slot += grid.num_cells();
    }
    Ok(CellGroupedDataset {
        grids,
        slot_offsets,
        transitions,
        transition_map,
        groups,
    })
}

/// `n` traversal indices of `group` in random order: distinct when the group
/// is large enough, otherwise every traversal once plus draws with
/// replacement.
pub fn sample_traversals<R: Rng + ?Sized>(group: &CellGroup, n: usize, rng: &mut R) -> Result<Vec<usize>, TrainError> {
    let len = group.traversals.len();
    if len == 0 {
        return Err(TrainError::EmptyGroup);
    }
    if len >= n {
        return Ok(index::sample(rng, len, n).into_vec());
    }
    let mut out: Vec<usize> = (0..len).collect();
    while out.len() < n {
        out.push(rng.random_range(0..len));
    }
    out.shuffle(rng);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_cells: usize,
    pub lr_dynamics: f64,
    pub lr_mapper: f64,
    /// Step size for the directly optimized cell latents.
    pub lr_latents: f64,
    /// Smoothness weight.
    pub lambda: f64,
    /// Traversals per cell sample.
    pub n_traversals: usize,
    /// Std of the initial cell latents.
    pub latent_init_std: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_cells: 96,
            lr_dynamics: 1e-3,
            lr_mapper: 1e-4,
            lr_latents: 1e-2,
            lambda: 0.1,
            n_traversals: 3,
            latent_init_std: 0.1,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.n_traversals == 0 {
            return bad("n_traversals must be at least 1");
        }
        if self.batch_cells == 0 {
            return bad("batch_cells must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if [self.lr_dynamics, self.lr_mapper, self.lr_latents].iter().any(|lr| !(*lr > 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(self.latent_init_std >= 0.0) {
            return bad("latent_init_std must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub stage: String,
    pub loss_dyn: f64,
    pub loss_smooth: f64,
    pub loss_mapper: f64,
}

pub fn write_train_log<W: Write>(rows: &[TrainLogRow], w: W) -> Result<(), TrainError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(|e| TrainError::Csv(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_train_log<R: Read>(r: R) -> Result<Vec<TrainLogRow>, TrainError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| TrainError::Csv(e.to_string()))
}

/// Directly optimized point latents, one row per grid cell of every map.
#[derive(Clone, Debug)]
pub struct LatentTable {
    pub params: ParamStore,
}

pub const LATENTS_FILE: &str = "latents.params";
const LATENTS_NAME: &str = "lbar";

impl LatentTable {
    pub fn new<R: Rng + ?Sized>(rows: usize, k: usize, std: f64, rng: &mut R) -> Result<Self, TrainError> {
        let data = (0..rows * k).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut params = ParamStore::new(ParamOwner::Latents);
        params.insert(LATENTS_NAME, Tensor::matrix(rows, k, data)?)?;
        Ok(Self { params })
    }

    pub fn tensor(&self) -> &Tensor {
        self.params.at(0)
    }

    pub fn rows(&self) -> usize {
        self.tensor().rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.tensor().cols()
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        self.tensor().row_slice(slot)
    }

    pub fn save(&self, dir: &FsPath) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        nn::write_params(&self.params, &dir.join(LATENTS_FILE))?;
        Ok(())
    }

    pub fn load(dir: &FsPath) -> Result<Self, TrainError> {
        let params = nn::read_params(&dir.join(LATENTS_FILE), ParamOwner::Latents)?;
        params.index_of(LATENTS_NAME)?;
        Ok(Self { params })
    }
}

/// Differentiable mean squared difference of neighboring latent rows.
pub fn smoothness_graph(g: &mut Graph, table: Var, pairs: &[(usize, usize)]) -> Result<Var, NnError> {
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ra = g.gather_rows(table, &a)?;
    let rb = g.gather_rows(table, &b)?;
    let d = g.sub(ra, rb)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / pairs.len() as f64))
}

/// How the latent block of each dynamics input row is supplied.
#[derive(Clone, Debug)]
pub enum LatentFeed {
    /// Latent-blind model.
    None,
    /// Rows of a trainable table.
    Table { table: Var, slots: Vec<usize> },
    /// Fixed values, `k` per row.
    Values { k: usize, data: Vec<f64> },
}

/// Per-member bootstrap resamples of `rows` row indices.
pub fn bootstrap<R: Rng + ?Sized>(members: usize, rows: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..members).map(|_| (0..rows).map(|_| rng.random_range(0..rows)).collect()).collect()
}

/// Sum over members of the mean Gaussian NLL on each member's bootstrap
/// resample of `transitions`.
pub fn dynamics_loss(
    g: &mut Graph,
    ens: &Ensemble,
    member_vars: &[Vec<Var>],
    data: &[Transition],
    transitions: &[usize],
    feed: &LatentFeed,
    boot: &[Vec<usize>],
) -> Result<Var, TrainError> {
    let norm = &ens.normalizer;
    let k = ens.latent_dim();
    let mut total: Option<Var> = None;
    for (m, idx) in boot.iter().enumerate() {
        let r = idx.len();
        let width = match feed {
            LatentFeed::Values { k, .. } => BASE_INPUT_DIM + k,
            _ => BASE_INPUT_DIM,
        };
        let mut x = vec![0.0; r * width];
        let mut y = vec![0.0; r * OUTPUT_DIM];
        for (row, &i) in idx.iter().enumerate() {
            let t = &data[transitions[i]];
            let latent: &[f64] = match feed {
                LatentFeed::Values { k, data } => &data[i * k..(i + 1) * k],
                _ => &[],
            };
            norm.input_row(&t.s_in, t.action, latent, &mut x[row * width..(row + 1) * width]);
            norm.normalize_target(&t.s_out, &mut y[row * OUTPUT_DIM..(row + 1) * OUTPUT_DIM]);
        }
        let base = g.constant(Tensor::matrix(r, width, x)?);
        let input = match feed {
            LatentFeed::Table { table, slots } => {
                let rows: Vec<usize> = idx.iter().map(|&i| slots[i]).collect();
                let l = g.gather_rows(*table, &rows)?;
                g.concat_cols(&[base, l])?
            }
            _ => base,
        };
        if g.value(input).cols() != BASE_INPUT_DIM + k {
            return Err(TrainError::Config(format!(
                "latent feed width {} does not match ensemble latent dim {k}",
                g.value(input).cols() - BASE_INPUT_DIM
            )));
        }
        let target = g.constant(Tensor::matrix(r, OUTPUT_DIM, y)?);
        let (mean, lv) = ens.forward_graph(m, g, &member_vars[m], input)?;
        let nll = nn::gaussian_nll(g, mean, lv, target)?;
        total = Some(match total {
            Some(t) => g.add(t, nll)?,
            None => nll,
        });
    }
    total.ok_or(TrainError::EmptyData)
}

fn finite(v: f64, stage: u8, epoch: usize, what: &'static str) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::Diverged { stage, epoch, what })
    }
}

/// Cell samples of one epoch, shuffled and chunked. Each cell appears
/// `ceil(traversals / n)` times, so an epoch passes over every traversal
/// about once.
fn epoch_batches<R: Rng + ?Sized>(groups: &[CellGroup], n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, group)| std::iter::repeat_n(g, group.traversals.len().div_ceil(n.max(1))))
        .collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// One random transition of each of `n` sampled traversals of `group`.
fn sample_transitions<R: Rng + ?Sized>(group: &CellGroup, n: usize, rng: &mut R) -> Result<Vec<(usize, usize)>, TrainError> {
    Ok(sample_traversals(group, n, rng)?
        .into_iter()
        .map(|tr| {
            let ts = &group.traversals[tr].transitions;
            (tr, ts[rng.random_range(0..ts.len())])
        })
        .collect())
}

fn step_members(ens: &mut Ensemble, adams: &mut [Adam], vars: &[Vec<Var>], grads: &mut nn::Gradients, lr: f64) -> Result<(), TrainError> {
    for (m, member) in ens.members_mut().iter_mut().enumerate() {
        let gs: Vec<Tensor> = vars[m].iter().map(|&v| grads.take(v)).collect();
        adams[m].step(&mut member.params, &gs, lr)?;
    }
    Ok(())
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Stage 1: dynamics and cell latents jointly under `Σ NLL + λ·L_s`.
pub fn stage1_train<R: Rng + ?Sized>(
    ens: &mut Ensemble,
    latents: &mut LatentTable,
    data: &CellGroupedDataset,
    cfg: &StageConfig,
    rng: &mut R,
) -> Result<Vec<TrainLogRow>, TrainError> {
    cfg.validate()?;
    if data.groups.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if latents.latent_dim() != ens.latent_dim() || latents.rows() != data.num_slots() {
        return Err(TrainError::Config("latent table does not match ensemble and dataset".into()));
    }
    let pairs = data.neighbor_slots();
    let mut adams: Vec<Adam> = ens.members().iter().map(|m| Adam::new(&m.params)).collect();
    let mut latent_adam = Adam::new(&latents.params);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut dyn_l, mut smooth_l) = (Vec::new(), Vec::new());
        for batch in epoch_batches(&data.groups, cfg.n_traversals, cfg.batch_cells, rng) {
            let mut transitions = Vec::new();
            let mut slots = Vec::new();
            for &gi in &batch {
                let group = &data.groups[gi];
                for (_, t) in sample_transitions(group, cfg.n_traversals, rng)? {
                    transitions.push(t);
                    slots.push(group.slot);
                }
            }
            let boot = bootstrap(ens.len(), transitions.len(), rng);
            let mut g = Graph::new();
            let vars: Vec<Vec<Var>> = ens.members().iter().map(|m| m.params.bind(&mut g)).collect();
            let table = latents.params.bind(&mut g)[0];
            let feed = LatentFeed::Table { table, slots };
            let ld = dynamics_loss(&mut g, ens, &vars, &data.transitions, &transitions, &feed, &boot)?;
            let ls = smoothness_graph(&mut g, table, &pairs)?;
            let weighted = g.scale(ls, cfg.lambda);
            let loss = g.add(ld, weighted)?;
            dyn_l.push(finite(g.value(ld).item(), 1, epoch, "dynamics loss")?);
            smooth_l.push(finite(g.value(ls).item(), 1, epoch, "smoothness loss")?);
            let mut grads = g.backward(loss)?;
            step_members(ens, &mut adams, &vars, &mut grads, cfg.lr_dynamics)?;
            latent_adam.step(&mut latents.params, &[grads.take(table)], cfg.lr_latents)?;
        }
        log.push(TrainLogRow {
            epoch,
            stage: "1".into(),
            loss_dyn: mean_of(&dyn_l),
            loss_smooth: mean_of(&smooth_l),
            loss_mapper: 0.0,
        });
    }
    Ok(log)
}

/// Dynamics-only training of a latent-blind ensemble.
pub fn train_no_map<R: Rng + ?Sized>(ens: &mut Ensemble, data: &CellGroupedDataset, cfg: &StageConfig, rng: &mut R) -> Result<Vec<TrainLogRow>, TrainError> {
    if ens.latent_dim() != 0 {
        return Err(TrainError::Config("the no-map baseline needs latent_dim 0".into()));
    }
    train_direct(ens, data, cfg, rng)
}

fn train_direct<R: Rng + ?Sized>(ens: &mut Ensemble, data: &CellGroupedDataset, cfg: &StageConfig, rng: &mut R) -> Result<Vec<TrainLogRow>, TrainError> {
    cfg.validate()?;
    if data.groups.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut adams: Vec<Adam> = ens.members().iter().map(|m| Adam::new(&m.params)).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut dyn_l = Vec::new();
        for batch in epoch_batches(&data.groups, cfg.n_traversals, cfg.batch_cells, rng) {
            let mut transitions = Vec::new();
            for &gi in &batch {
                let picks = sample_transitions(&data.groups[gi], cfg.n_traversals + 1, rng)?;
                transitions.extend(picks.into_iter().map(|(_, t)| t));
            }
            let feed = LatentFeed::None;
            let boot = bootstrap(ens.len(), transitions.len(), rng);
            let mut g = Graph::new();
            let vars: Vec<Vec<Var>> = ens.members().iter().map(|m| m.params.bind(&mut g)).collect();
            let ld = dynamics_loss(&mut g, ens, &vars, &data.transitions, &transitions, &feed, &boot)?;
            dyn_l.push(finite(g.value(ld).item(), 3, epoch, "dynamics loss")?);
            let mut grads = g.backward(ld)?;
            step_members(ens, &mut adams, &vars, &mut grads, cfg.lr_dynamics)?;
        }
        log.push(TrainLogRow {
            epoch,
            stage: "no-map".into(),
            loss_dyn: mean_of(&dyn_l),
            loss_smooth: 0.0,
            loss_mapper: 0.0,
        });
    }
    Ok(log)
}

/// Records the autoregressive mapper chain on `g`: step `n` maps `inputs[n]`
/// given the output of step `n - 1` (zero knowledge for `n = 0`). Returns one
/// `(mean, log_var)` pair per mapper call.
pub fn mapper_chain_graph(
    mapper: &Mapper,
    g: &mut Graph,
    vars: &[Var],
    inputs: &[Vec<&SensorBundle>],
) -> Result<Vec<(Var, Var)>, TrainError> {
    let k = mapper.spec().latent_dim;
    let mut out: Vec<(Var, Var)> = Vec::with_capacity(inputs.len());
    for step in inputs {
        let b = step.len();
        let zk = PrevLatent::zero_knowledge(k);
        let batch = mapper.batch(step.iter().map(|s| (*s, &zk)))?;
        let xs: Vec<Var> = batch.encoder_inputs.into_iter().map(|t| g.constant(t)).collect();
        let prev = match out.last() {
            None => g.constant(batch.prev),
            Some(&(mean, lv)) => {
                let flag = g.constant(Tensor::filled(vec![b, 1], 1.0));
                g.concat_cols(&[mean, lv, flag])?
            }
        };
        out.push(mapper.forward_graph(g, vars, &xs, prev)?);
    }
    Ok(out)
}

/// Stage 2: the mapper regresses the frozen cell latents through an
/// autoregressive chain of `N` traversals.
pub fn stage2_train<R: Rng + ?Sized>(
    mapper: &mut Mapper,
    latents: &LatentTable,
    data: &CellGroupedDataset,
    cfg: &StageConfig,
    rng: &mut R,
) -> Result<Vec<TrainLogRow>, TrainError> {
    cfg.validate()?;
    if data.groups.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let k = mapper.spec().latent_dim;
    if latents.latent_dim() != k {
        return Err(TrainError::Config("mapper and latent table disagree on latent_dim".into()));
    }
    let mut adam = Adam::new(&mapper.params);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut map_l = Vec::new();
        for batch in epoch_batches(&data.groups, cfg.n_traversals, cfg.batch_cells, rng) {
            let picks: Vec<Vec<usize>> = batch
                .iter()
                .map(|&gi| sample_traversals(&data.groups[gi], cfg.n_traversals, rng))
                .collect::<Result<_, _>>()?;
            let inputs: Vec<Vec<&SensorBundle>> = (0..cfg.n_traversals)
                .map(|n| {
                    batch
                        .iter()
                        .zip(&picks)
                        .map(|(&gi, p)| &data.groups[gi].traversals[p[n]].sensors)
                        .collect()
                })
                .collect();
            let mut target = Vec::with_capacity(batch.len() * k);
            for &gi in &batch {
                target.extend_from_slice(latents.row(data.groups[gi].slot));
            }
            let mut g = Graph::new();
            let vars = mapper.params.bind(&mut g);
            let target = g.constant(Tensor::matrix(batch.len(), k, target)?);
            let mut loss: Option<Var> = None;
            for (mean, lv) in mapper_chain_graph(mapper, &mut g, &vars, &inputs)? {
                let term = nn::gaussian_nll(&mut g, mean, lv, target)?;
                loss = Some(match loss {
                    Some(l) => g.add(l, term)?,
                    None => term,
                });
            }
            let loss = loss.ok_or(TrainError::EmptyData)?;
            map_l.push(finite(g.value(loss).item(), 2, epoch, "mapper loss")?);
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            adam.step(&mut mapper.params, &gs, cfg.lr_mapper)?;
        }
        log.push(TrainLogRow {
            epoch,
            stage: "2".into(),
            loss_dyn: 0.0,
            loss_smooth: 0.0,
            loss_mapper: mean_of(&map_l),
        });
    }
    Ok(log)
}

/// Tape-free mapper chain over a batch of cells: `outputs[n][c]` is the
/// estimate for cell `c` after its traversals `0..=n`.
pub fn mapper_chain(
    mapper: &dyn CellMapper,
    cells: &[CellIndex],
    inputs: &[Vec<&SensorBundle>],
) -> Result<Vec<Vec<MapperOutput>>, TrainError> {
    let k = mapper.latent_dim();
    let mut prev: Vec<PrevLatent> = vec![PrevLatent::zero_knowledge(k); cells.len()];
    let mut out = Vec::with_capacity(inputs.len());
    for step in inputs {
        let items: Vec<(CellIndex, MapperInput)> = cells
            .iter()
            .zip(step)
            .zip(&prev)
            .map(|((c, s), p)| {
                (
                    *c,
                    MapperInput {
                        sensors: (*s).clone(),
                        prev: p.clone(),
                    },
                )
            })
            .collect();
        let res = mapper.update_batch(&items)?;
        prev = res
            .iter()
            .map(|o| PrevLatent {
                mean: o.mean.clone(),
                log_var: o.log_var.clone(),
                visited: true,
            })
            .collect();
        out.push(res);
    }
    Ok(out)
}

/// Latents fed to the dynamics for traversals `0..=N` of one cell sample:
/// zero for traversal 0, and for `n ≥ 1` a reparameterized sample of the
/// mapper estimate after traversals `0..n`. `noise[n - 1]` drives sample `n`.
pub fn stage3_latents(mapper: &dyn CellMapper, cell: CellIndex, sensors: &[&SensorBundle], noise: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TrainError> {
    let k = mapper.latent_dim();
    let chain_inputs: Vec<Vec<&SensorBundle>> = sensors[..sensors.len().saturating_sub(1)].iter().map(|s| vec![*s]).collect();
    let outs = mapper_chain(mapper, &[cell], &chain_inputs)?;
    let mut latents = vec![vec![0.0; k]];
    for (n, o) in outs.iter().enumerate() {
        latents.push(nn::reparam_sample_value(&o[0].mean, &o[0].log_var, &noise[n]));
    }
    Ok(latents)
}

/// Transition indices and fed latents of one stage-3 batch.
#[derive(Clone, Debug)]
pub struct Stage3Batch {
    pub transitions: Vec<usize>,
    pub latents: Vec<f64>,
    pub k: usize,
}

/// Builds a stage-3 batch: `N + 1` transitions per cell, each from its own
/// sampled traversal. `mappers` holds one mapper, or one per map.
pub fn stage3_batch<R: Rng + ?Sized>(
    data: &CellGroupedDataset,
    cells: &[usize],
    mappers: &[&dyn CellMapper],
    n_traversals: usize,
    rng: &mut R,
) -> Result<Stage3Batch, TrainError> {
    let k = mappers.first().ok_or_else(|| TrainError::Config("no mapper given".into()))?.latent_dim();
    let picks: Vec<Vec<(usize, usize)>> = cells
        .iter()
        .map(|&gi| sample_transitions(&data.groups[gi], n_traversals + 1, rng))
        .collect::<Result<_, _>>()?;
    // Cells grouped by mapper so each chain step is one batched call.
    let mut by_mapper: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, &gi) in cells.iter().enumerate() {
        let mi = if mappers.len() == 1 { 0 } else { data.groups[gi].map_id };
        by_mapper.entry(mi).or_default().push(j);
    }
    let mut chains: Vec<Vec<Option<MapperOutput>>> = vec![vec![None; n_traversals]; cells.len()];
    for (mi, js) in &by_mapper {
        let mapper = *mappers.get(*mi).ok_or_else(|| TrainError::Config(format!("no mapper for map {mi}")))?;
        let cell_ids: Vec<CellIndex> = js.iter().map(|&j| data.groups[cells[j]].cell).collect();
        let inputs: Vec<Vec<&SensorBundle>> = (0..n_traversals)
            .map(|n| js.iter().map(|&j| &data.groups[cells[j]].traversals[picks[j][n].0].sensors).collect())
            .collect();
        for (n, step) in mapper_chain(mapper, &cell_ids, &inputs)?.into_iter().enumerate() {
            for (o, &j) in step.into_iter().zip(js) {
                chains[j][n] = Some(o);
            }
        }
    }
    let mut transitions = Vec::with_capacity(cells.len() * (n_traversals + 1));
    let mut latents = Vec::with_capacity(transitions.capacity() * k);
    for (j, pick) in picks.iter().enumerate() {
        for (n, &(_, t)) in pick.iter().enumerate() {
            transitions.push(t);
            if n == 0 {
                latents.extend(std::iter::repeat_n(0.0, k));
            } else {
                let o = chains[j][n - 1].as_ref().expect("chain covers every step");
                let noise: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                latents.extend(nn::reparam_sample_value(&o.mean, &o.log_var, &noise));
            }
        }
    }
    Ok(Stage3Batch { transitions, latents, k })
}

/// Stage 3: refines the dynamics on latents produced by frozen mappers, with
/// the zero latent for each sample's first traversal.
pub fn stage3_train<R: Rng + ?Sized>(
    ens: &mut Ensemble,
    mappers: &[&dyn CellMapper],
    data: &CellGroupedDataset,
    cfg: &StageConfig,
    rng: &mut R,
) -> Result<Vec<TrainLogRow>, TrainError> {
    cfg.validate()?;
    if data.groups.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if mappers.iter().any(|m| m.latent_dim() != ens.latent_dim()) {
        return Err(TrainError::Config("mapper and ensemble disagree on latent_dim".into()));
    }
    let mut adams: Vec<Adam> = ens.members().iter().map(|m| Adam::new(&m.params)).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut dyn_l = Vec::new();
        for batch in epoch_batches(&data.groups, cfg.n_traversals, cfg.batch_cells, rng) {
            let b = stage3_batch(data, &batch, mappers, cfg.n_traversals, rng)?;
            let boot = bootstrap(ens.len(), b.transitions.len(), rng);
            let feed = LatentFeed::Values { k: b.k, data: b.latents };
            let mut g = Graph::new();
            let vars: Vec<Vec<Var>> = ens.members().iter().map(|m| m.params.bind(&mut g)).collect();
            let ld = dynamics_loss(&mut g, ens, &vars, &data.transitions, &b.transitions, &feed, &boot)?;
            dyn_l.push(finite(g.value(ld).item(), 3, epoch, "dynamics loss")?);
            let mut grads = g.backward(ld)?;
            step_members(ens, &mut adams, &vars, &mut grads, cfg.lr_dynamics)?;
        }
        log.push(TrainLogRow {
            epoch,
            stage: "3".into(),
            loss_dyn: mean_of(&dyn_l),
            loss_smooth: 0.0,
            loss_mapper: 0.0,
        });
    }
    Ok(log)
}

/// Seed of an independent stream derived from a base seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output of stage 1.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub ensemble: Ensemble,
    pub latents: LatentTable,
    pub log: Vec<TrainLogRow>,
}

pub fn run_stage1(spec: &EnsembleSpec, data: &CellGroupedDataset, cfg: &StageConfig, seed: u64) -> Result<Stage1Output, TrainError> {
    let norm = Normalizer::fit(&data.transitions)?;
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut ensemble = Ensemble::new(spec.clone(), norm, &mut init)?;
    let mut latents = LatentTable::new(data.num_slots(), spec.latent_dim, cfg.latent_init_std, &mut init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11));
    let log = stage1_train(&mut ensemble, &mut latents, data, cfg, &mut rng)?;
    Ok(Stage1Output { ensemble, latents, log })
}

pub fn run_stage2(
    spec: &MapperSpec,
    latents: &LatentTable,
    data: &CellGroupedDataset,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(Mapper, Vec<TrainLogRow>), TrainError> {
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut mapper = Mapper::new(spec.clone(), HistoryNorm::fit(&data.transitions), &mut init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 12));
    let log = stage2_train(&mut mapper, latents, data, cfg, &mut rng)?;
    Ok((mapper, log))
}

pub fn run_stage3(
    mut ensemble: Ensemble,
    mappers: &[&dyn CellMapper],
    data: &CellGroupedDataset,
    cfg: &StageConfig,
    seed: u64,
) -> Result<(Ensemble, Vec<TrainLogRow>), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 13));
    let log = stage3_train(&mut ensemble, mappers, data, cfg, &mut rng)?;
    Ok((ensemble, log))
}

/// Latent-blind baseline trained for as many epochs as stages 1 and 3 combined.
pub fn run_no_map(spec: &EnsembleSpec, data: &CellGroupedDataset, cfg: &StageConfig, seed: u64) -> Result<(Ensemble, Vec<TrainLogRow>), TrainError> {
    let spec = EnsembleSpec {
        latent_dim: 0,
        ..spec.clone()
    };
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4));
    let mut ensemble = Ensemble::new(spec, Normalizer::fit(&data.transitions)?, &mut init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 14));
    let cfg = StageConfig {
        epochs: 2 * cfg.epochs,
        ..cfg.clone()
    };
    let log = train_no_map(&mut ensemble, data, &cfg, &mut rng)?;
    Ok((ensemble, log))
}

/// Ground-truth baseline: a 1-dim ensemble trained through the stage-3
/// traversal chain with a [`MaterialMapper`] per map, `tracks[i]` giving the
/// layout of map `i`. Trains for as many epochs as stages 1 and 3 combined.
pub fn run_ground_truth(spec: &EnsembleSpec, tracks: &[TrackSpec], data: &CellGroupedDataset, cfg: &StageConfig, seed: u64) -> Result<(Ensemble, Vec<TrainLogRow>), TrainError> {
    if tracks.len() != data.grids.len() {
        return Err(TrainError::Config(format!("{} tracks for {} maps", tracks.len(), data.grids.len())));
    }
    let spec = EnsembleSpec {
        latent_dim: 1,
        ..spec.clone()
    };
    let mappers: Vec<MaterialMapper> = tracks.iter().map(|t| MaterialMapper { track: t.clone() }).collect();
    let refs: Vec<&dyn CellMapper> = mappers.iter().map(|m| m as &dyn CellMapper).collect();
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5));
    let mut ensemble = Ensemble::new(spec, Normalizer::fit(&data.transitions)?, &mut init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 15));
    let cfg = StageConfig {
        epochs: 2 * cfg.epochs,
        ..cfg.clone()
    };
    let mut log = stage3_train(&mut ensemble, &refs, data, &cfg, &mut rng)?;
    log.iter_mut().for_each(|r| r.stage = "gt".into());
    Ok((ensemble, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::smoothness_loss;
    use crate::dynamics::material_code;
    use crate::mapper::Modalities;
    use crate::sim::track::{block_layout, default_grid, TrackShape, WAYPOINTS_PER_TRACK};
    use crate::sim::{collect_dataset, Path, TrackSpec, World};

    fn two_material_world() -> World {
        let grid = default_grid();
        let waypoints = TrackShape::Oval.waypoints(WAYPOINTS_PER_TRACK);
        let path = Path::new(&waypoints).unwrap();
        World::from_track(TrackSpec {
            material_layout: block_layout(&grid, &path, &[0, 2], 6, 5),
            waypoints,
            lane_half_width: 0.6,
        })
    }

    fn small_ens(k: usize) -> EnsembleSpec {
        EnsembleSpec {
            members: 2,
            hidden_dims: vec![32],
            latent_dim: k,
        }
    }

    fn small_mapper(k: usize) -> MapperSpec {
        MapperSpec {
            encoder_hidden: vec![16],
            feature_dim: 8,
            fusion_hidden: vec![32],
            latent_dim: k,
            modalities: Modalities::ALL,
        }
    }

    fn grouped(seconds: f64) -> (World, CellGroupedDataset) {
        let w = two_material_world();
        let ds = collect_dataset(&w, seconds, 3).unwrap();
        let g = group_by_cell(&[(w.grid, &ds)]).unwrap();
        (w, g)
    }

    fn bits(store: &ParamStore) -> Vec<u64> {
        store.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    }

    fn ens_bits(e: &Ensemble) -> Vec<u64> {
        e.members().iter().flat_map(|m| bits(&m.params)).collect()
    }

    #[test]
    fn grouping_partitions_transitions() {
        let w = two_material_world();
        let ds = collect_dataset(&w, 60.0, 1).unwrap();
        let g = group_by_cell(&[(w.grid, &ds)]).unwrap();
        assert_eq!(g.transitions.len(), 600);
        assert_eq!(g.num_traversals(), ds.traversal_ranges().len());
        let mut seen = vec![0u32; g.transitions.len()];
        for group in &g.groups {
            for tr in &group.traversals {
                for &i in &tr.transitions {
                    seen[i] += 1;
                    assert_eq!(g.transitions[i].cell, group.cell);
                }
                assert_eq!(tr.sensors, g.transitions[*tr.transitions.last().unwrap()].sensors);
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(g.groups.len() > 20);

        // Two maps keep separate slots.
        let g2 = group_by_cell(&[(w.grid, &ds), (w.grid, &ds)]).unwrap();
        assert_eq!(g2.groups.len(), 2 * g.groups.len());
        assert_eq!(g2.num_slots(), 2 * w.grid.num_cells());
        assert!(matches!(group_by_cell(&[(w.grid, &Dataset::default())]), Err(TrainError::EmptyData)));
    }

    #[test]
    fn single_cell_world_is_one_group() {
        let w = two_material_world();
        let ds = collect_dataset(&w, 2.0, 1).unwrap();
        let grid = GridSpec::new(-100.0, -100.0, 200.0, 1, 1).unwrap();
        let mut one = ds.clone();
        for t in &mut one.transitions {
            t.cell = CellIndex::new(0, 0);
            t.traversal_id = 0;
        }
        let g = group_by_cell(&[(grid, &one)]).unwrap();
        assert_eq!(g.groups.len(), 1);
        assert_eq!(g.groups[0].traversals.len(), 1);
        assert_eq!(g.groups[0].traversals[0].transitions.len(), ds.len());
    }

    fn group_of(n: usize) -> CellGroup {
        CellGroup {
            map_id: 0,
            cell: CellIndex::new(0, 0),
            slot: 0,
            traversals: (0..n)
                .map(|i| Traversal {
                    transitions: vec![i],
                    sensors: SensorBundle::default(),
                })
                .collect(),
        }
    }

    #[test]
    fn traversal_sampling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = sample_traversals(&group_of(10), 3, &mut rng).unwrap();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 3);

        let s = sample_traversals(&group_of(2), 3, &mut rng).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.contains(&0) && s.contains(&1));

        let a = sample_traversals(&group_of(10), 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_traversals(&group_of(10), 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(sample_traversals(&group_of(0), 3, &mut rng), Err(TrainError::EmptyGroup)));
    }

    #[test]
    fn smoothness_graph_matches_value() {
        let grid = GridSpec::new(0.0, 0.0, 1.0, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = LatentTable::new(12, 2, 1.0, &mut rng).unwrap();
        let mut g = Graph::new();
        let v = table.params.bind(&mut g)[0];
        let s = smoothness_graph(&mut g, v, &grid.neighbor_pairs()).unwrap();
        let want = smoothness_loss(&grid, table.tensor().data(), 2);
        assert!((g.value(s).item() - want).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_leaves_pure_dynamics_sum() {
        let (_, data) = grouped(20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ens = Ensemble::new(small_ens(2), Normalizer::fit(&data.transitions).unwrap(), &mut rng).unwrap();
        let table = LatentTable::new(data.num_slots(), 2, 0.5, &mut rng).unwrap();
        let transitions: Vec<usize> = (0..20).collect();
        let slots: Vec<usize> = transitions.iter().map(|&i| i % 7).collect();
        let boot = bootstrap(2, 20, &mut rng);

        let mut g = Graph::new();
        let vars: Vec<Vec<Var>> = ens.members().iter().map(|m| m.params.bind(&mut g)).collect();
        let t = table.params.bind(&mut g)[0];
        let feed = LatentFeed::Table { table: t, slots: slots.clone() };
        let ld = dynamics_loss(&mut g, &ens, &vars, &data.transitions, &transitions, &feed, &boot).unwrap();
        let ls = smoothness_graph(&mut g, t, &data.neighbor_slots()).unwrap();
        let w = g.scale(ls, 0.0);
        let total = g.add(ld, w).unwrap();

        // Independent oracle through the plain prediction path.
        let mut want = 0.0;
        for (m, idx) in boot.iter().enumerate() {
            let mut acc = 0.0;
            for &i in idx {
                let tr = &data.transitions[transitions[i]];
                let mut x = vec![0.0; BASE_INPUT_DIM + 2];
                ens.normalizer.input_row(&tr.s_in, tr.action, table.row(slots[i]), &mut x);
                let out = ens.members()[m].net().forward(&ens.members()[m].params, &Tensor::row(&x)).unwrap();
                let lv: Vec<f64> = out.data()[OUTPUT_DIM..].iter().map(|&v| nn::soft_clamp_log_var_value(v)).collect();
                let mut y = [0.0; OUTPUT_DIM];
                ens.normalizer.normalize_target(&tr.s_out, &mut y);
                acc += nn::gaussian_nll_value(&out.data()[..OUTPUT_DIM], &lv, &y);
            }
            want += acc / idx.len() as f64;
        }
        assert!((g.value(total).item() - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn stage1_learns_and_separates_materials() {
        let (w, data) = grouped(300.0);
        let cfg = StageConfig {
            epochs: 200,
            batch_cells: 32,
            ..Default::default()
        };
        let out = run_stage1(&small_ens(2), &data, &cfg, 7).unwrap();
        let first = out.log[0].loss_dyn;
        let last = out.log.last().unwrap().loss_dyn;
        assert!(last < first - 0.5 * first.abs(), "loss {first} -> {last}");

        let cells: Vec<(u32, &[f64])> = data
            .groups
            .iter()
            .filter(|g| g.traversals.len() >= 3)
            .map(|g| (w.track.material_at_cell(g.cell), out.latents.row(g.slot)))
            .collect();
        let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                let d: f64 = cells[i].1.iter().zip(cells[j].1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if cells[i].0 == cells[j].0 {
                    same += d;
                    ns += 1;
                } else {
                    diff += d;
                    nd += 1;
                }
            }
        }
        assert!(ns > 0 && nd > 0);
        assert!(diff / nd as f64 > same / ns as f64, "between {} within {}", diff / nd as f64, same / ns as f64);
    }

    #[test]
    fn shuffle_order_barely_changes_final_loss() {
        let (_, data) = grouped(120.0);
        let cfg = StageConfig {
            epochs: 60,
            batch_cells: 16,
            ..Default::default()
        };
        let mut init = ChaCha8Rng::seed_from_u64(1);
        let ens = Ensemble::new(small_ens(2), Normalizer::fit(&data.transitions).unwrap(), &mut init).unwrap();
        let table = LatentTable::new(data.num_slots(), 2, 0.1, &mut init).unwrap();
        let run = |seed| {
            let (mut e, mut t) = (ens.clone(), table.clone());
            let log = stage1_train(&mut e, &mut t, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let tail = &log[log.len() - 5..];
            tail.iter().map(|r| r.loss_dyn).sum::<f64>() / 5.0
        };
        let (a, b) = (run(100), run(200));
        assert!((a - b).abs() <= 0.1 * a.abs().max(b.abs()), "{a} vs {b}");
    }

    #[test]
    fn chain_issues_one_call_per_traversal() {
        let (_, data) = grouped(30.0);
        let mapper = Mapper::new(small_mapper(2), HistoryNorm::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let sensors: Vec<Vec<&SensorBundle>> = (0..3).map(|n| vec![&data.groups[0].traversals[0].sensors; n + 1].into_iter().take(1).collect()).collect();
        let mut g = Graph::new();
        let vars = mapper.params.bind(&mut g);
        assert_eq!(mapper_chain_graph(&mapper, &mut g, &vars, &sensors).unwrap().len(), 3);
        let cells = [data.groups[0].cell];
        let plain = mapper_chain(&mapper, &cells, &sensors).unwrap();
        let graph = mapper_chain_graph(&mapper, &mut g, &vars, &sensors).unwrap();
        for (p, (m, _)) in plain.iter().zip(graph) {
            for (a, b) in p[0].mean.iter().zip(g.value(m).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stage3_batch_accounting_and_zero_first_latent() {
        let (w, data) = grouped(60.0);
        let mm = MaterialMapper { track: w.track.clone() };
        let cells: Vec<usize> = (0..5).collect();
        let b = stage3_batch(&data, &cells, &[&mm], 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.transitions.len(), 5 * 4);
        for (j, &gi) in cells.iter().enumerate() {
            assert_eq!(b.latents[j * 4], 0.0);
            let code = material_code(w.track.material_at_cell(data.groups[gi].cell));
            for n in 1..4 {
                assert!((b.latents[j * 4 + n] - code).abs() < 0.05);
            }
        }
    }

    #[test]
    fn stage3_latent_ignores_its_own_traversal() {
        let (_, data) = grouped(30.0);
        let mapper = Mapper::new(small_mapper(2), HistoryNorm::identity(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let trs: Vec<SensorBundle> = data.transitions[..4].iter().map(|t| t.sensors.clone()).collect();
        let noise = vec![vec![0.3, -0.2]; 3];
        let cell = CellIndex::new(0, 0);
        let refs: Vec<&SensorBundle> = trs.iter().collect();
        let base = stage3_latents(&mapper, cell, &refs, &noise).unwrap();
        assert_eq!(base.len(), 4);
        assert_eq!(base[0], vec![0.0, 0.0]);
        for n in 0..4 {
            let mut changed = trs.clone();
            changed[n].audio_feat.iter_mut().for_each(|v| *v += 5.0);
            changed[n].state_hist[9][0] += 3.0;
            let refs: Vec<&SensorBundle> = changed.iter().collect();
            let pert = stage3_latents(&mapper, cell, &refs, &noise).unwrap();
            assert_eq!(pert[n], base[n], "latent {n} depends on its own traversal");
            if n + 1 < 4 {
                assert_ne!(pert[n + 1], base[n + 1]);
            }
        }
    }

    #[test]
    fn freeze_contracts_hold() {
        let (w, data) = grouped(40.0);
        let cfg = StageConfig {
            epochs: 2,
            batch_cells: 16,
            ..Default::default()
        };
        let s1 = run_stage1(&small_ens(2), &data, &cfg, 1).unwrap();
        let (ens_before, lat_before) = (ens_bits(&s1.ensemble), bits(&s1.latents.params));
        let (mapper, log2) = run_stage2(&small_mapper(2), &s1.latents, &data, &cfg, 1).unwrap();
        assert_eq!(log2.len(), 2);
        assert_eq!(bits(&s1.latents.params), lat_before);
        assert_eq!(ens_bits(&s1.ensemble), ens_before);
        let mapper_before = bits(&mapper.params);
        let (refined, _) = run_stage3(s1.ensemble.clone(), &[&mapper], &data, &cfg, 1).unwrap();
        assert_eq!(bits(&mapper.params), mapper_before);
        assert_ne!(ens_bits(&refined), ens_before);

        let mm = MaterialMapper { track: w.track.clone() };
        assert!(run_stage3(s1.ensemble.clone(), &[&mm], &data, &cfg, 1).is_err());
    }

    #[test]
    fn ground_truth_baseline_contract() {
        let (w, data) = grouped(40.0);
        let cfg = StageConfig {
            epochs: 2,
            batch_cells: 16,
            ..Default::default()
        };
        let (ens, log) = run_ground_truth(&small_ens(2), &[w.track.clone()], &data, &cfg, 2).unwrap();
        assert_eq!(ens.latent_dim(), 1);
        assert_eq!(log.len(), 4);
        assert!(log.iter().all(|r| r.stage == "gt" && r.loss_dyn.is_finite()));
        assert!(run_ground_truth(&small_ens(2), &[], &data, &cfg, 2).is_err());
    }

    #[test]
    fn mapper_recovers_linear_audio_target() {
        let w = two_material_world();
        let mut ds = collect_dataset(&w, 120.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let proj: Vec<Vec<f64>> = (0..2).map(|_| (0..16).map(|_| rng.random_range(-0.3..0.3)).collect()).collect();
        // Noiseless audio: one fixed vector per cell.
        for t in &mut ds.transitions {
            let c = t.cell;
            let mut r = ChaCha8Rng::seed_from_u64((c.col * 1000 + c.row) as u64);
            t.sensors.audio_feat.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        }
        let data = group_by_cell(&[(w.grid, &ds)]).unwrap();
        let mut table = LatentTable::new(data.num_slots(), 2, 0.0, &mut rng).unwrap();
        let mut norm_sq = 0.0;
        let mut count = 0.0;
        for g in &data.groups {
            let a = g.traversals[0].sensors.audio_feat;
            let target: Vec<f64> = proj.iter().map(|p| p.iter().zip(&a).map(|(w, x)| w * x).sum()).collect();
            norm_sq += target.iter().map(|v| v * v).sum::<f64>();
            count += 1.0;
            let k = 2;
            table.params.values_mut(0)[g.slot * k..g.slot * k + k].copy_from_slice(&target);
        }
        let spec = small_mapper(2).with_modalities(Modalities::from_label("A").unwrap()).unwrap();
        let cfg = StageConfig {
            epochs: 300,
            batch_cells: 16,
            lr_mapper: 3e-3,
            ..Default::default()
        };
        let (mapper, _) = run_stage2(&spec, &table, &data, &cfg, 0).unwrap();
        let mut err_sq = 0.0;
        for g in &data.groups {
            let out = mapper
                .update(
                    g.cell,
                    &MapperInput {
                        sensors: g.traversals[0].sensors.clone(),
                        prev: PrevLatent::zero_knowledge(2),
                    },
                )
                .unwrap();
            err_sq += out.mean.iter().zip(table.row(g.slot)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let (rms_err, rms_norm) = ((err_sq / count).sqrt(), (norm_sq / count).sqrt());
        assert!(rms_err < 0.1 * rms_norm, "error {rms_err} vs norm {rms_norm}");
    }

    #[test]
    fn train_log_round_trip() {
        let rows = vec![
            TrainLogRow {
                epoch: 1,
                stage: "1".into(),
                loss_dyn: 1.5,
                loss_smooth: 0.25,
                loss_mapper: 0.0,
            },
            TrainLogRow {
                epoch: 1,
                stage: "2".into(),
                loss_dyn: 0.0,
                loss_smooth: 0.0,
                loss_mapper: -0.75,
            },
        ];
        let mut buf = Vec::new();
        write_train_log(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,stage,loss_dyn,loss_smooth,loss_mapper\n"));
        assert_eq!(read_train_log(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn latent_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = LatentTable::new(6, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        t.save(dir.path()).unwrap();
        assert_eq!(bits(&LatentTable::load(dir.path()).unwrap().params), bits(&t.params));
    }
}
