//! Closed single-lane tracks, material layouts and path geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vehicle::Pose2;
use super::SimError;
use crate::gridmap::{CellIndex, GridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    pub id: u32,
    pub friction: f64,
    pub embed_seed: u64,
}

/// Default surfaces: high, medium and low grip.
pub fn default_materials() -> Vec<MaterialSpec> {
    vec![
        MaterialSpec { id: 0, friction: 1.0, embed_seed: 1001 },
        MaterialSpec { id: 1, friction: 0.6, embed_seed: 1002 },
        MaterialSpec { id: 2, friction: 0.3, embed_seed: 1003 },
    ]
}

pub fn validate_materials(materials: &[MaterialSpec]) -> Result<(), SimError> {
    if materials.is_empty() {
        return Err(SimError::Config("no materials".into()));
    }
    for (i, m) in materials.iter().enumerate() {
        if !(m.friction > 0.0 && m.friction <= 1.5) {
            return Err(SimError::Config(format!("material {} friction {}", m.id, m.friction)));
        }
        if materials[..i].iter().any(|o| o.id == m.id) {
            return Err(SimError::Config(format!("duplicate material id {}", m.id)));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSpec {
    /// Closed loop; the last waypoint connects back to the first.
    pub waypoints: Vec<(f64, f64)>,
    pub lane_half_width: f64,
    /// Material id per grid cell, indexed `[row][col]`.
    pub material_layout: Vec<Vec<u32>>,
}

impl TrackSpec {
    pub fn validate(&self, grid: &GridSpec, materials: &[MaterialSpec]) -> Result<(), SimError> {
        if self.waypoints.len() < 3 {
            return Err(SimError::Config("track needs at least 3 waypoints".into()));
        }
        let n = self.waypoints.len();
        for i in 0..n {
            let (a, b) = (self.waypoints[i], self.waypoints[(i + 1) % n]);
            if !(a.0.is_finite() && a.1.is_finite()) {
                return Err(SimError::Config(format!("waypoint {i} is not finite")));
            }
            if a == b {
                return Err(SimError::Config(format!("waypoints {i} and {} coincide", (i + 1) % n)));
            }
        }
        if !(self.lane_half_width > 0.0) {
            return Err(SimError::Config("lane_half_width must be positive".into()));
        }
        if self.material_layout.len() != grid.n_rows || self.material_layout.iter().any(|r| r.len() != grid.n_cols) {
            return Err(SimError::Config(format!(
                "material layout must be {}x{} (rows x cols)",
                grid.n_rows, grid.n_cols
            )));
        }
        for id in self.material_layout.iter().flatten() {
            if !materials.iter().any(|m| m.id == *id) {
                return Err(SimError::Config(format!("layout uses unknown material {id}")));
            }
        }
        Ok(())
    }

    /// Material under a cell; cells outside the layout read as material 0.
    pub fn material_at_cell(&self, c: CellIndex) -> u32 {
        if c.row < 0 || c.col < 0 {
            return 0;
        }
        self.material_layout
            .get(c.row as usize)
            .and_then(|r| r.get(c.col as usize))
            .copied()
            .unwrap_or(0)
    }
}

/// Position of a point relative to a closed path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arc length of the closest path point, in `[0, length)`.
    pub s: f64,
    /// Signed offset, positive to the left of the travel direction.
    pub lateral: f64,
    pub distance: f64,
}

/// Arc-length parameterized closed polyline.
#[derive(Clone, Debug)]
pub struct Path {
    pts: Vec<(f64, f64)>,
    cum: Vec<f64>,
    length: f64,
    curvature: Vec<f64>,
}

impl Path {
    pub fn new(waypoints: &[(f64, f64)]) -> Result<Self, SimError> {
        let n = waypoints.len();
        if n < 3 {
            return Err(SimError::Config("path needs at least 3 waypoints".into()));
        }
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        for i in 0..n {
            let (a, b) = (waypoints[i], waypoints[(i + 1) % n]);
            let d = (b.0 - a.0).hypot(b.1 - a.1);
            if !(d > 0.0) {
                return Err(SimError::Config(format!("degenerate segment at waypoint {i}")));
            }
            cum.push(cum[i] + d);
        }
        let curvature = (0..n)
            .map(|i| menger(waypoints[(i + n - 1) % n], waypoints[i], waypoints[(i + 1) % n]))
            .collect();
        Ok(Self {
            pts: waypoints.to_vec(),
            length: cum[n],
            cum,
            curvature,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn waypoints(&self) -> &[(f64, f64)] {
        &self.pts
    }

    fn segment_of(&self, s: f64) -> (usize, f64) {
        let s = s.rem_euclid(self.length);
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
        .min(self.pts.len() - 1);
        (i, s - self.cum[i])
    }

    /// Point and unit tangent at arc length `s` (wrapped).
    pub fn point_at(&self, s: f64) -> ((f64, f64), (f64, f64)) {
        let (i, off) = self.segment_of(s);
        let a = self.pts[i];
        let b = self.pts[(i + 1) % self.pts.len()];
        let seg = self.cum[i + 1] - self.cum[i];
        let t = ((b.0 - a.0) / seg, (b.1 - a.1) / seg);
        ((a.0 + t.0 * off, a.1 + t.1 * off), t)
    }

    /// Unsigned curvature near arc length `s`.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, off) = self.segment_of(s);
        let seg = self.cum[i + 1] - self.cum[i];
        let w = off / seg;
        (1.0 - w) * self.curvature[i] + w * self.curvature[(i + 1) % self.pts.len()]
    }

    pub fn max_curvature_between(&self, s0: f64, s1: f64) -> f64 {
        let steps = (((s1 - s0) / 0.1).ceil() as usize).max(1);
        (0..=steps)
            .map(|j| self.curvature_at(s0 + (s1 - s0) * j as f64 / steps as f64))
            .fold(0.0, f64::max)
    }

    pub fn project(&self, x: f64, y: f64) -> Projection {
        let n = self.pts.len();
        let mut best = (f64::INFINITY, 0usize, 0.0);
        for i in 0..n {
            let a = self.pts[i];
            let b = self.pts[(i + 1) % n];
            let (ex, ey) = (b.0 - a.0, b.1 - a.1);
            let len2 = ex * ex + ey * ey;
            let t = (((x - a.0) * ex + (y - a.1) * ey) / len2).clamp(0.0, 1.0);
            let (px, py) = (a.0 + t * ex, a.1 + t * ey);
            let d2 = (x - px) * (x - px) + (y - py) * (y - py);
            if d2 < best.0 {
                best = (d2, i, t);
            }
        }
        let (d2, i, t) = best;
        let a = self.pts[i];
        let b = self.pts[(i + 1) % n];
        let (ex, ey) = (b.0 - a.0, b.1 - a.1);
        let cross = ex * (y - a.1) - ey * (x - a.0);
        let distance = d2.sqrt();
        let s = (self.cum[i] + t * (self.cum[i + 1] - self.cum[i])).rem_euclid(self.length);
        Projection {
            s,
            lateral: if cross >= 0.0 { distance } else { -distance },
            distance,
        }
    }

    /// Signed arc-length difference `to − from`, wrapped to `(−L/2, L/2]`.
    pub fn progress_delta(&self, from: f64, to: f64) -> f64 {
        let mut d = (to - from).rem_euclid(self.length);
        if d > 0.5 * self.length {
            d -= self.length;
        }
        d
    }

    /// Pose on the path at arc length `s`, heading along the tangent.
    pub fn pose_at(&self, s: f64) -> Pose2 {
        let ((x, y), (tx, ty)) = self.point_at(s);
        Pose2::new(x, y, ty.atan2(tx))
    }

    /// First waypoint, heading toward the second.
    pub fn start_pose(&self) -> Pose2 {
        let (a, b) = (self.pts[0], self.pts[1]);
        Pose2::new(a.0, a.1, (b.1 - a.1).atan2(b.0 - a.0))
    }
}

fn menger(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let ab = (b.0 - a.0).hypot(b.1 - a.1);
    let bc = (c.0 - b.0).hypot(c.1 - b.1);
    let ca = (a.0 - c.0).hypot(a.1 - c.1);
    2.0 * cross.abs() / (ab * bc * ca)
}

/// Grid shared by every preset track: 24 × 18 cells of 0.5 m centered on the origin.
pub fn default_grid() -> GridSpec {
    GridSpec {
        origin_x: -6.0,
        origin_y: -4.5,
        cell_size: 0.5,
        n_cols: 24,
        n_rows: 18,
    }
}

/// Track outlines with different curvature profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackShape {
    /// Long gentle oval.
    Oval,
    /// Oval pinched in the middle, with two tight hairpins.
    Peanut,
    /// Rounded triangle with three sharp corners.
    Trefoil,
}

impl TrackShape {
    pub const ALL: [TrackShape; 3] = [TrackShape::Oval, TrackShape::Peanut, TrackShape::Trefoil];

    pub fn waypoints(self, n: usize) -> Vec<(f64, f64)> {
        let (ax, ay, c2, c3) = match self {
            TrackShape::Oval => (4.4, 3.0, 0.0, 0.05),
            TrackShape::Peanut => (3.6, 4.4, 0.35, 0.0),
            TrackShape::Trefoil => (3.6, 3.2, 0.0, 0.16),
        };
        (0..n)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                let r = 1.0 + c2 * (2.0 * t).cos() + c3 * (3.0 * t).cos();
                (ax * r * t.cos(), ay * r * t.sin())
            })
            .collect()
    }
}

/// Random block layout of materials aligned with `grid`.
///
/// Blocks are `block` cells wide with a seeded offset. The seed is advanced
/// until every material covers at least 15% of the cells the track passes
/// through, so each layout exercises all surfaces.
pub fn block_layout(grid: &GridSpec, path: &Path, material_ids: &[u32], block: usize, seed: u64) -> Vec<Vec<u32>> {
    let track_cells = track_cells(grid, path);
    let mut attempt = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt);
        let off_c = rng.random_range(0..block);
        let off_r = rng.random_range(0..block);
        let bc = (grid.n_cols + off_c).div_ceil(block);
        let br = (grid.n_rows + off_r).div_ceil(block);
        let blocks: Vec<u32> = (0..bc * br)
            .map(|_| material_ids[rng.random_range(0..material_ids.len())])
            .collect();
        let layout: Vec<Vec<u32>> = (0..grid.n_rows)
            .map(|r| {
                (0..grid.n_cols)
                    .map(|c| blocks[((r + off_r) / block) * bc + (c + off_c) / block])
                    .collect()
            })
            .collect();
        let balanced = material_ids.iter().all(|id| {
            let n = track_cells.iter().filter(|c| layout[c.row as usize][c.col as usize] == *id).count();
            n as f64 >= 0.15 * track_cells.len() as f64
        });
        if balanced || material_ids.len() * 2 > track_cells.len() {
            return layout;
        }
        attempt = attempt.wrapping_add(0x9E37_79B9);
    }
}

/// In-grid cells touched by the path, sampled every 5 cm.
pub fn track_cells(grid: &GridSpec, path: &Path) -> Vec<CellIndex> {
    let steps = (path.length() / 0.05).ceil() as usize;
    let mut cells: Vec<CellIndex> = (0..steps)
        .filter_map(|i| {
            let ((x, y), _) = path.point_at(i as f64 * 0.05);
            grid.world_to_cell(x, y).ok().filter(|c| grid.contains(*c))
        })
        .collect();
    cells.sort();
    cells.dedup();
    cells
}

/// Layout seeds for the three training tracks and the held-out arrangement.
pub const TRAIN_LAYOUT_SEEDS: [u64; 3] = [11, 12, 13];
pub const HELD_OUT_LAYOUT_SEED: u64 = 97;
pub const MATERIAL_BLOCK: usize = 6;
pub const WAYPOINTS_PER_TRACK: usize = 240;

/// Preset track with a seeded block layout over the default materials.
pub fn preset_track(shape: TrackShape, layout_seed: u64) -> TrackSpec {
    let grid = default_grid();
    let waypoints = shape.waypoints(WAYPOINTS_PER_TRACK);
    let path = Path::new(&waypoints).expect("preset waypoints are distinct");
    let ids: Vec<u32> = default_materials().iter().map(|m| m.id).collect();
    TrackSpec {
        material_layout: block_layout(&grid, &path, &ids, MATERIAL_BLOCK, layout_seed),
        waypoints,
        lane_half_width: 0.6,
    }
}

/// The three training tracks.
pub fn training_tracks() -> Vec<TrackSpec> {
    TrackShape::ALL
        .iter()
        .zip(TRAIN_LAYOUT_SEEDS)
        .map(|(s, seed)| preset_track(*s, seed))
        .collect()
}

/// Evaluation track: the first training outline with its materials rearranged.
pub fn held_out_track() -> TrackSpec {
    preset_track(TrackShape::Oval, HELD_OUT_LAYOUT_SEED)
}
