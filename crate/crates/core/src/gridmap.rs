//! Grid of per-cell Gaussian latent distributions.
//!
//! Cells that were never observed carry no parameters and always sample the
//! zero vector. One writer updates cells through [`LatentMap::apply_update`];
//! readers take cheap immutable [`MapSnapshot`]s and never lock while reading.

use std::io::{Read, Write};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{MAX_LOG_VAR, MIN_LOG_VAR};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("non-finite coordinate ({0}, {1})")]
    NonFiniteCoordinate(f64, f64),
    #[error("cell ({col}, {row}) is outside the grid")]
    OutOfBounds { col: i64, row: i64 },
    #[error("latent parameters must be finite with dimension {expected}")]
    InvalidParams { expected: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("map csv: {0}")]
    Csv(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
    pub n_cols: usize,
    pub n_rows: usize,
}

fn default_cell_size() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub col: i64,
    pub row: i64,
}

impl CellIndex {
    pub fn new(col: i64, row: i64) -> Self {
        Self { col, row }
    }
}

impl GridSpec {
    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64, n_cols: usize, n_rows: usize) -> Result<Self, MapError> {
        let spec = Self {
            origin_x,
            origin_y,
            cell_size,
            n_cols,
            n_rows,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return Err(MapError::InvalidGrid(format!("cell_size {}", self.cell_size)));
        }
        if self.n_cols == 0 || self.n_rows == 0 {
            return Err(MapError::InvalidGrid("grid needs at least one cell".into()));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(MapError::InvalidGrid("non-finite origin".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.n_cols * self.n_rows
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Result<CellIndex, MapError> {
        if !x.is_finite() || !y.is_finite() {
            return Err(MapError::NonFiniteCoordinate(x, y));
        }
        Ok(CellIndex {
            col: ((x - self.origin_x) / self.cell_size).floor() as i64,
            row: ((y - self.origin_y) / self.cell_size).floor() as i64,
        })
    }

    pub fn cell_center(&self, c: CellIndex) -> (f64, f64) {
        (
            self.origin_x + (c.col as f64 + 0.5) * self.cell_size,
            self.origin_y + (c.row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn contains(&self, c: CellIndex) -> bool {
        c.col >= 0 && c.row >= 0 && (c.col as usize) < self.n_cols && (c.row as usize) < self.n_rows
    }

    /// Row-major position of an in-bounds cell.
    pub fn linear(&self, c: CellIndex) -> Option<usize> {
        self.contains(c)
            .then(|| c.row as usize * self.n_cols + c.col as usize)
    }

    pub fn cell_at(&self, linear: usize) -> CellIndex {
        CellIndex {
            col: (linear % self.n_cols) as i64,
            row: (linear / self.n_cols) as i64,
        }
    }

    /// Pairs of linear indices of 4-neighbor adjacent cells, each pair once.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for r in 0..self.n_rows {
            for c in 0..self.n_cols {
                let i = r * self.n_cols + c;
                if c + 1 < self.n_cols {
                    pairs.push((i, i + 1));
                }
                if r + 1 < self.n_rows {
                    pairs.push((i, i + self.n_cols));
                }
            }
        }
        pairs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LatentDistribution {
    /// No observation yet; samples are exactly zero.
    ZeroKnowledge,
    Gaussian { mean: Vec<f64>, log_var: Vec<f64> },
}

impl LatentDistribution {
    pub fn is_zero_knowledge(&self) -> bool {
        matches!(self, LatentDistribution::ZeroKnowledge)
    }
}

/// `mean + exp(½ log_var) ⊙ noise`; the zero vector for unknown cells.
pub fn sample_latent(dist: &LatentDistribution, noise: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; noise.len()];
    sample_latent_into(dist, noise, &mut out);
    out
}

pub fn sample_latent_into(dist: &LatentDistribution, noise: &[f64], out: &mut [f64]) {
    match dist {
        LatentDistribution::ZeroKnowledge => out.fill(0.0),
        LatentDistribution::Gaussian { mean, log_var } => {
            for i in 0..out.len() {
                out[i] = mean[i] + (0.5 * log_var[i]).exp() * noise[i];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCell {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub visited: bool,
    pub version: u64,
}

impl LatentCell {
    fn fresh(k: usize) -> Self {
        Self {
            mean: vec![0.0; k],
            log_var: vec![0.0; k],
            visited: false,
            version: 0,
        }
    }

    pub fn distribution(&self) -> LatentDistribution {
        if self.visited {
            LatentDistribution::Gaussian {
                mean: self.mean.clone(),
                log_var: self.log_var.clone(),
            }
        } else {
            LatentDistribution::ZeroKnowledge
        }
    }
}

#[derive(Clone, Debug)]
struct MapState {
    version: u64,
    cells: Vec<Arc<LatentCell>>,
}

/// Shared latent map. Wrap in an `Arc` to hand it to a mapping thread.
#[derive(Debug)]
pub struct LatentMap {
    spec: GridSpec,
    latent_dim: usize,
    state: RwLock<Arc<MapState>>,
}

impl LatentMap {
    pub fn new(spec: GridSpec, latent_dim: usize) -> Result<Self, MapError> {
        spec.validate()?;
        let fresh = Arc::new(LatentCell::fresh(latent_dim));
        Ok(Self {
            spec,
            latent_dim,
            state: RwLock::new(Arc::new(MapState {
                version: 0,
                cells: vec![fresh; spec.num_cells()],
            })),
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn get_latent(&self, c: CellIndex) -> LatentDistribution {
        self.snapshot().get_latent(c)
    }

    /// Writes new parameters for `c`. `log_var` is clamped to the valid range.
    /// Returns the cell's new version.
    pub fn apply_update(&self, c: CellIndex, mean: &[f64], log_var: &[f64]) -> Result<u64, MapError> {
        let idx = self
            .spec
            .linear(c)
            .ok_or(MapError::OutOfBounds { col: c.col, row: c.row })?;
        if mean.len() != self.latent_dim
            || log_var.len() != self.latent_dim
            || !mean.iter().chain(log_var).all(|v| v.is_finite())
        {
            return Err(MapError::InvalidParams {
                expected: self.latent_dim,
            });
        }
        let mut guard = self.state.write().unwrap_or_else(|e| e.into_inner());
        let state = Arc::make_mut(&mut guard);
        let version = state.cells[idx].version + 1;
        state.cells[idx] = Arc::new(LatentCell {
            mean: mean.to_vec(),
            log_var: log_var.iter().map(|v| v.clamp(MIN_LOG_VAR, MAX_LOG_VAR)).collect(),
            visited: true,
            version,
        });
        state.version += 1;
        Ok(version)
    }

    pub fn snapshot(&self) -> MapSnapshot {
        let state = self.state.read().unwrap_or_else(|e| e.into_inner()).clone();
        MapSnapshot {
            spec: self.spec,
            latent_dim: self.latent_dim,
            state,
        }
    }

    /// Total number of accepted updates.
    pub fn version(&self) -> u64 {
        self.state.read().unwrap_or_else(|e| e.into_inner()).version
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MapError> {
        self.snapshot().write_csv(w)
    }

    /// Loads a map exported by [`MapSnapshot::write_csv`]. Visited cells get
    /// version 1.
    pub fn read_csv<R: Read>(spec: GridSpec, latent_dim: usize, r: R) -> Result<Self, MapError> {
        let map = Self::new(spec, latent_dim)?;
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(|e| MapError::Csv(e.to_string()))?.clone();
        if headers.len() != 3 + 2 * latent_dim {
            return Err(MapError::Csv(format!(
                "expected {} columns, found {}",
                3 + 2 * latent_dim,
                headers.len()
            )));
        }
        for rec in rdr.records() {
            let rec = rec.map_err(|e| MapError::Csv(e.to_string()))?;
            let num = |i: usize| -> Result<f64, MapError> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| MapError::Csv(format!("column {i}: {e}")))
            };
            let c = CellIndex::new(num(0)? as i64, num(1)? as i64);
            if num(2)? != 0.0 {
                let mean: Vec<f64> = (0..latent_dim).map(|i| num(3 + i)).collect::<Result<_, _>>()?;
                let lv: Vec<f64> = (0..latent_dim)
                    .map(|i| num(3 + latent_dim + i))
                    .collect::<Result<_, _>>()?;
                map.apply_update(c, &mean, &lv)?;
            }
        }
        Ok(map)
    }
}

/// Immutable view of a [`LatentMap`] at one point in time.
#[derive(Clone, Debug)]
pub struct MapSnapshot {
    spec: GridSpec,
    latent_dim: usize,
    state: Arc<MapState>,
}

impl MapSnapshot {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn version(&self) -> u64 {
        self.state.version
    }

    pub fn cell(&self, c: CellIndex) -> Option<&LatentCell> {
        self.spec.linear(c).map(|i| self.state.cells[i].as_ref())
    }

    pub fn cells(&self) -> impl Iterator<Item = (CellIndex, &LatentCell)> {
        self.state
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| (self.spec.cell_at(i), c.as_ref()))
    }

    pub fn get_latent(&self, c: CellIndex) -> LatentDistribution {
        match self.cell(c) {
            Some(cell) => cell.distribution(),
            None => LatentDistribution::ZeroKnowledge,
        }
    }

    /// Samples the latent at a world position into `out`; returns whether the
    /// cell was known.
    pub fn sample_at(&self, x: f64, y: f64, noise: &[f64], out: &mut [f64]) -> bool {
        let cell = self
            .spec
            .world_to_cell(x, y)
            .ok()
            .and_then(|c| self.cell(c))
            .filter(|c| c.visited);
        match cell {
            Some(cell) => {
                for i in 0..out.len() {
                    out[i] = cell.mean[i] + (0.5 * cell.log_var[i]).exp() * noise[i];
                }
                true
            }
            None => {
                out.fill(0.0);
                false
            }
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MapError> {
        self.write_csv_with(w, &[], |_, _| Vec::new())
    }

    /// Writes the map with extra per-cell columns appended.
    pub fn write_csv_with<W: Write>(
        &self,
        w: W,
        extra_headers: &[&str],
        extra: impl Fn(CellIndex, &LatentCell) -> Vec<f64>,
    ) -> Result<(), MapError> {
        let k = self.latent_dim;
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["col".to_string(), "row".to_string(), "visited".to_string()];
        header.extend((0..k).map(|i| format!("mean_{i}")));
        header.extend((0..k).map(|i| format!("logvar_{i}")));
        header.extend(extra_headers.iter().map(|s| s.to_string()));
        wtr.write_record(&header).map_err(|e| MapError::Csv(e.to_string()))?;
        for (c, cell) in self.cells() {
            let mut rec = vec![
                c.col.to_string(),
                c.row.to_string(),
                u8::from(cell.visited).to_string(),
            ];
            rec.extend(cell.mean.iter().map(f64::to_string));
            rec.extend(cell.log_var.iter().map(f64::to_string));
            rec.extend(extra(c, cell).iter().map(f64::to_string));
            wtr.write_record(&rec).map_err(|e| MapError::Csv(e.to_string()))?;
        }
        wtr.flush().map_err(|e| MapError::Csv(e.to_string()))?;
        Ok(())
    }
}

/// Mean squared difference between 4-neighbor adjacent latent vectors.
///
/// `means` is row-major with `k` values per cell.
pub fn smoothness_loss(spec: &GridSpec, means: &[f64], k: usize) -> f64 {
    assert_eq!(means.len(), spec.num_cells() * k);
    let pairs = spec.neighbor_pairs();
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|&(a, b)| {
            (0..k)
                .map(|d| {
                    let diff = means[a * k + d] - means[b * k + d];
                    diff * diff
                })
                .sum::<f64>()
        })
        .sum();
    total / pairs.len() as f64
}
