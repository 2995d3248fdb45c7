//! Transitions at 10 Hz, expert data collection and the dataset CSV format.

use std::io::{Read, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::expert::{ExpertConfig, ExpertDriver};
use super::sensors::{render_sensors, HistoryBuffer, SensorBundle, ACTION_DIM, FEATURE_DIM, HISTORY_LEN, STATE_DIM};
use super::vehicle::{Action, Pose2, SimState, SIM_DT};
use super::{SimError, World};
use crate::gridmap::CellIndex;

/// Simulator steps per transition (0.1 s at 100 Hz).
pub const STEPS_PER_TRANSITION: usize = 10;
pub const TRANSITION_DT: f64 = SIM_DT * STEPS_PER_TRANSITION as f64;
pub const OUTPUT_DIM: usize = 10;
/// Distance from the path beyond which collection puts the car back on the line.
pub const RECOVERY_DISTANCE: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub t: f64,
    pub traversal_id: u64,
    pub cell: CellIndex,
    pub s_in: [f64; STATE_DIM],
    pub action: Action,
    /// `[Δp_x, Δp_y, Δγ]` in the start body frame, then the terminal input state.
    pub s_out: [f64; OUTPUT_DIM],
    pub sensors: SensorBundle,
    /// Global pose at the start of the transition.
    pub pose: Pose2,
}

impl Transition {
    /// Global pose at the end of the transition.
    pub fn end_pose(&self) -> Pose2 {
        self.pose.compose(self.s_out[0], self.s_out[1], self.s_out[2])
    }
}

/// Builds a transition from `STEPS_PER_TRANSITION + 1` consecutive states
/// recorded under a constant `action`.
pub fn make_transition(states: &[SimState], action: Action, world: &World, sensors: SensorBundle, t: f64) -> Result<Transition, SimError> {
    if states.len() != STEPS_PER_TRANSITION + 1 {
        return Err(SimError::Config(format!(
            "a transition needs {} states, got {}",
            STEPS_PER_TRANSITION + 1,
            states.len()
        )));
    }
    let (start, end) = (&states[0], &states[STEPS_PER_TRANSITION]);
    let (dx, dy, dyaw) = start.pose.relative(&end.pose);
    let mut s_out = [0.0; OUTPUT_DIM];
    s_out[..3].copy_from_slice(&[dx, dy, dyaw]);
    s_out[3..].copy_from_slice(&end.input_state());
    let cell = world
        .grid
        .world_to_cell(start.pose.x, start.pose.y)
        .map_err(|_| SimError::NonFinite)?;
    Ok(Transition {
        t,
        traversal_id: 0,
        cell,
        s_in: start.input_state(),
        action,
        s_out,
        sensors,
        pose: start.pose,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Index ranges of consecutive transitions sharing a traversal id.
    pub fn traversal_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.transitions.len() {
            if i == self.transitions.len() || self.transitions[i].traversal_id != self.transitions[start].traversal_id {
                out.push(start..i);
                start = i;
            }
        }
        out
    }
}

/// Simulates `states.len() - 1` steps under `action`, reading friction at
/// each step's start position.
fn advance(world: &World, start: SimState, action: Action, out: &mut Vec<SimState>) -> Result<(), SimError> {
    out.clear();
    out.push(start);
    let mut s = start;
    for _ in 0..STEPS_PER_TRANSITION {
        s = world.step(&s, action)?;
        out.push(s);
    }
    Ok(())
}

/// Drives the expert for `duration` seconds starting at rest on the track
/// start pose and records one transition every 0.1 s.
pub fn collect_dataset(world: &World, duration: f64, seed: u64) -> Result<Dataset, SimError> {
    collect_dataset_with(world, duration, seed, ExpertConfig::default())
}

pub fn collect_dataset_with(world: &World, duration: f64, seed: u64, expert: ExpertConfig) -> Result<Dataset, SimError> {
    if !(duration > 0.0) {
        return Err(SimError::Config("duration must be positive".into()));
    }
    let n = (duration / TRANSITION_DT).round() as usize;
    let path = world.path();
    let mut driver = ExpertDriver::new(expert, seed);
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5E45);
    let mut history = HistoryBuffer::new();
    let mut state = SimState::at_rest(path.start_pose());
    let mut states = Vec::with_capacity(STEPS_PER_TRANSITION + 1);
    let mut transitions = Vec::with_capacity(n);
    let mut traversal = 0u64;
    let mut prev_cell: Option<CellIndex> = None;

    for i in 0..n {
        let t = i as f64 * TRANSITION_DT;
        history.push_state(state.input_state());
        let sensors = render_sensors(&state, world, &history, &mut sensor_rng);
        let action = driver.act(&state, path, &world.vehicle, TRANSITION_DT);
        advance(world, state, action, &mut states)?;
        let mut tr = make_transition(&states, action, world, sensors, t)?;
        if let Some(prev) = prev_cell {
            if prev != tr.cell {
                traversal += 1;
            }
        }
        tr.traversal_id = traversal;
        prev_cell = Some(tr.cell);
        transitions.push(tr);
        history.push_action(action);
        state = states[STEPS_PER_TRANSITION];

        let proj = path.project(state.pose.x, state.pose.y);
        let off_grid = !world
            .grid
            .world_to_cell(state.pose.x, state.pose.y)
            .map(|c| world.grid.contains(c))
            .unwrap_or(false);
        if off_grid || proj.distance > RECOVERY_DISTANCE {
            state = SimState::at_rest(path.pose_at(proj.s));
            history.clear();
            prev_cell = None;
            traversal += 1;
        }
    }
    Ok(Dataset { transitions })
}

fn header() -> Vec<String> {
    let mut h: Vec<String> = ["t", "traversal_id", "cell_col", "cell_row"].iter().map(|s| s.to_string()).collect();
    h.extend((0..STATE_DIM).map(|i| format!("s_in_{i}")));
    h.push("a_th".into());
    h.push("a_st".into());
    h.extend((0..OUTPUT_DIM).map(|i| format!("s_out_{i}")));
    h.extend((0..FEATURE_DIM).map(|i| format!("img_{i}")));
    h.extend((0..FEATURE_DIM).map(|i| format!("aud_{i}")));
    h.extend((0..HISTORY_LEN * STATE_DIM).map(|i| format!("hist_s_{i}")));
    h.extend((0..HISTORY_LEN * ACTION_DIM).map(|i| format!("hist_a_{i}")));
    h
}

const POSE_COLUMNS: [&str; 3] = ["pose_x", "pose_y", "pose_yaw"];

fn csv_err(e: impl std::fmt::Display) -> SimError {
    SimError::Csv(e.to_string())
}

/// Writes the dataset with trailing global start-pose columns.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, w: W) -> Result<(), SimError> {
    let mut wr = csv::Writer::from_writer(w);
    let mut h = header();
    h.extend(POSE_COLUMNS.iter().map(|s| s.to_string()));
    wr.write_record(&h).map_err(csv_err)?;
    let mut rec: Vec<String> = Vec::with_capacity(h.len());
    for tr in &ds.transitions {
        rec.clear();
        rec.push(tr.t.to_string());
        rec.push(tr.traversal_id.to_string());
        rec.push(tr.cell.col.to_string());
        rec.push(tr.cell.row.to_string());
        let action = tr.action.to_array();
        let pose = [tr.pose.x, tr.pose.y, tr.pose.yaw];
        let floats = tr
            .s_in
            .iter()
            .chain(&action)
            .chain(&tr.s_out)
            .chain(&tr.sensors.image_feat)
            .chain(&tr.sensors.audio_feat)
            .chain(tr.sensors.state_hist.iter().flatten())
            .chain(tr.sensors.action_hist.iter().flatten())
            .chain(&pose);
        rec.extend(floats.map(|v| v.to_string()));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a dataset CSV.
///
/// Files without pose columns get poses by chaining each transition's
/// displacement from `start`, which is exact only for uninterrupted drives.
pub fn read_dataset_csv<R: Read>(r: R, start: Pose2) -> Result<Dataset, SimError> {
    let mut rd = csv::Reader::from_reader(r);
    let expected = header();
    let got: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(|s| s.to_string()).collect();
    let has_pose = got.len() == expected.len() + POSE_COLUMNS.len()
        && got[expected.len()..].iter().zip(POSE_COLUMNS).all(|(a, b)| a == b);
    if got[..expected.len().min(got.len())] != expected[..] || !(got.len() == expected.len() || has_pose) {
        return Err(SimError::Csv("unexpected dataset header".into()));
    }
    let mut transitions = Vec::new();
    let mut pose = start;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| SimError::Csv(format!("row {}: bad {what}", line + 2));
        let f = |i: usize| -> Result<f64, SimError> { rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(&got[i])) };
        let int = |i: usize| -> Result<i64, SimError> { rec.get(i).and_then(|v| v.parse::<i64>().ok()).ok_or_else(|| bad(&got[i])) };
        let mut col = 4;
        let mut take = |n: usize| -> Result<Vec<f64>, SimError> {
            let v = (col..col + n).map(f).collect::<Result<Vec<_>, _>>()?;
            col += n;
            Ok(v)
        };
        let s_in = take(STATE_DIM)?;
        let a = take(ACTION_DIM)?;
        let s_out = take(OUTPUT_DIM)?;
        let img = take(FEATURE_DIM)?;
        let aud = take(FEATURE_DIM)?;
        let hs = take(HISTORY_LEN * STATE_DIM)?;
        let ha = take(HISTORY_LEN * ACTION_DIM)?;
        if has_pose {
            let p = take(3)?;
            pose = Pose2::new(p[0], p[1], p[2]);
        }
        let mut sensors = SensorBundle::default();
        sensors.image_feat.copy_from_slice(&img);
        sensors.audio_feat.copy_from_slice(&aud);
        for k in 0..HISTORY_LEN {
            sensors.state_hist[k].copy_from_slice(&hs[k * STATE_DIM..(k + 1) * STATE_DIM]);
            sensors.action_hist[k].copy_from_slice(&ha[k * ACTION_DIM..(k + 1) * ACTION_DIM]);
        }
        let traversal_id = int(1)?;
        if traversal_id < 0 {
            return Err(bad("traversal_id"));
        }
        let tr = Transition {
            t: f(0)?,
            traversal_id: traversal_id as u64,
            cell: CellIndex::new(int(2)?, int(3)?),
            s_in: s_in.try_into().expect("length checked"),
            action: Action {
                throttle: a[0],
                steer: a[1],
            },
            s_out: s_out.try_into().expect("length checked"),
            sensors,
            pose,
        };
        pose = tr.end_pose();
        transitions.push(tr);
    }
    Ok(Dataset { transitions })
}
