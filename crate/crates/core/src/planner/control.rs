//! Closed-loop driving: plan at 10 Hz while a mapping thread folds completed
//! traversals into the latent map.

use std::io::{Read, Write};
use std::sync::mpsc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{plan, reward_terms, shift_solution, IcemConfig, PlanError, RewardWeights};
use crate::dynamics::{Ensemble, LatentSource, NoLatent, RolloutStart};
use crate::gridmap::{CellIndex, LatentMap};
use crate::mapper::{CellMapper, MapperInput, PrevLatent};
use crate::sim::dataset::{RECOVERY_DISTANCE, STEPS_PER_TRANSITION, TRANSITION_DT};
use crate::sim::{make_transition, render_sensors, Action, Dataset, HistoryBuffer, SensorBundle, SimState, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub icem: IcemConfig,
    pub weights: RewardWeights,
    pub laps: usize,
    /// Simulated time limit in seconds.
    pub max_time: f64,
    /// Run the mapper inline between control steps.
    pub deterministic: bool,
    pub seed: u64,
    /// The run aborts once interventions exceed this count.
    pub max_interventions: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            icem: IcemConfig::default(),
            weights: RewardWeights::default(),
            laps: 10,
            max_time: 600.0,
            deterministic: false,
            seed: 0,
            max_interventions: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub a_th: f64,
    pub a_st: f64,
    pub reward: f64,
    pub lap: usize,
    pub map_version: u64,
    pub intervention: u8,
}

/// One row per control step, logged after the step is executed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunLogRow>,
}

impl RunLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PlanError> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r).map_err(|e| PlanError::Csv(e.to_string()))?;
        }
        wtr.flush().map_err(|e| PlanError::Csv(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, PlanError> {
        let rows = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| PlanError::Csv(e.to_string()))?;
        Ok(Self { rows })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: RunLog,
    /// Every executed step as a transition, with traversal ids.
    pub transitions: Dataset,
    /// Transition count at each lap completion.
    pub lap_ends: Vec<usize>,
    pub interventions: usize,
    /// Wall-clock seconds spent in each planning call.
    pub plan_seconds: Vec<f64>,
    /// Updates handed to the mapper.
    pub dispatched: usize,
    pub completed: bool,
}

/// Counts net forward crossings of the start line (arc length 0).
#[derive(Clone, Debug)]
pub struct LapCounter {
    prev_s: f64,
    balance: i64,
    laps: usize,
}

impl LapCounter {
    pub fn new(s0: f64) -> Self {
        Self {
            prev_s: s0,
            balance: 0,
            laps: 0,
        }
    }

    pub fn laps(&self) -> usize {
        self.laps
    }

    /// Advances to arc length `s`; true when a new lap completes.
    pub fn update(&mut self, path: &crate::sim::Path, s: f64) -> bool {
        let delta = path.progress_delta(self.prev_s, s);
        if delta > 0.0 && s < self.prev_s {
            self.balance += 1;
        } else if delta < 0.0 && s > self.prev_s {
            self.balance -= 1;
        }
        self.prev_s = s;
        if self.balance > self.laps as i64 {
            self.laps = self.balance as usize;
            true
        } else {
            false
        }
    }
}

/// Folds one completed traversal of `cell` into `map`.
pub fn apply_traversal(mapper: &dyn CellMapper, map: &LatentMap, cell: CellIndex, sensors: SensorBundle) -> Result<u64, PlanError> {
    let prev = PrevLatent::from_distribution(&map.get_latent(cell), map.latent_dim());
    let out = mapper.update(cell, &MapperInput { sensors, prev })?;
    Ok(map.apply_update(cell, &out.mean, &out.log_var)?)
}

/// Drives `laps` laps of `world` with the planner. With a mapper, every
/// completed traversal updates `map`: inline in deterministic mode, otherwise
/// on a mapping thread that the control loop never waits for.
pub fn control_loop(
    world: &World,
    ens: &Ensemble,
    mapper: Option<&dyn CellMapper>,
    map: &LatentMap,
    cfg: &ControlConfig,
) -> Result<RunOutput, PlanError> {
    cfg.icem.validate()?;
    cfg.weights.validate()?;
    if ens.latent_dim() > 0 && map.latent_dim() != ens.latent_dim() {
        return Err(PlanError::Config("map and ensemble disagree on latent_dim".into()));
    }
    if let Some(m) = mapper {
        if m.latent_dim() != map.latent_dim() {
            return Err(PlanError::Config("mapper and map disagree on latent_dim".into()));
        }
    }
    if cfg.deterministic || mapper.is_none() {
        let mut inline = |cell, sensors| match mapper {
            Some(m) => apply_traversal(m, map, cell, sensors).map(|_| ()),
            None => Ok(()),
        };
        return drive(world, ens, map, cfg, &mut inline);
    }
    let mapper = mapper.expect("checked above");
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(CellIndex, SensorBundle)>();
        let worker = scope.spawn(move || -> Result<(), PlanError> {
            for (cell, sensors) in rx {
                apply_traversal(mapper, map, cell, sensors)?;
            }
            Ok(())
        });
        let mut send = |cell, sensors| tx.send((cell, sensors)).map_err(|e| PlanError::MappingThread(e.to_string()));
        let out = drive(world, ens, map, cfg, &mut send);
        drop(tx);
        let joined = worker.join().map_err(|_| PlanError::MappingThread("mapping thread panicked".into()))?;
        let out = out?;
        joined?;
        Ok(out)
    })
}

fn drive(
    world: &World,
    ens: &Ensemble,
    map: &LatentMap,
    cfg: &ControlConfig,
    dispatch: &mut dyn FnMut(CellIndex, SensorBundle) -> Result<(), PlanError>,
) -> Result<RunOutput, PlanError> {
    let path = world.path();
    let d_b = cfg.weights.boundary(world.track.lane_half_width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5E45);
    let mut history = HistoryBuffer::new();
    let mut state = SimState::at_rest(path.start_pose());
    let mut laps = LapCounter::new(path.project(state.pose.x, state.pose.y).s);
    let mut prev_solution: Option<Vec<Action>> = None;
    let mut last_throttle = 0.0;
    let mut states = Vec::with_capacity(STEPS_PER_TRANSITION + 1);
    let mut out = RunOutput {
        log: RunLog::default(),
        transitions: Dataset::default(),
        lap_ends: Vec::new(),
        interventions: 0,
        plan_seconds: Vec::new(),
        dispatched: 0,
        completed: false,
    };
    let mut traversal: Option<(CellIndex, SensorBundle)> = None;
    let mut traversal_id = 0u64;
    let n_steps = (cfg.max_time / TRANSITION_DT).round() as usize;

    for i in 0..n_steps {
        let t = i as f64 * TRANSITION_DT;
        history.push_state(state.input_state());
        let sensors = render_sensors(&state, world, &history, &mut sensor_rng);

        let snapshot = map.snapshot();
        let latents: &dyn LatentSource = if ens.latent_dim() == 0 { &NoLatent } else { &snapshot };
        let start = RolloutStart {
            s_in: state.input_state(),
            pose: state.pose,
        };
        let clock = Instant::now();
        let result = plan(
            &cfg.icem,
            ens,
            latents,
            start,
            path,
            &cfg.weights,
            d_b,
            prev_solution.as_deref(),
            last_throttle,
            &mut rng,
        )?;
        out.plan_seconds.push(clock.elapsed().as_secs_f64());
        let action = result.action;
        prev_solution = (!result.all_invalid).then(|| shift_solution(&result.sequence));

        states.clear();
        states.push(state);
        let mut s = state;
        for _ in 0..STEPS_PER_TRANSITION {
            s = world.step(&s, action)?;
            states.push(s);
        }
        let mut tr = make_transition(&states, action, world, sensors, t)?;
        match &mut traversal {
            Some((cell, last)) if *cell == tr.cell => *last = tr.sensors.clone(),
            _ => {
                if let Some((cell, last)) = traversal.take() {
                    dispatch(cell, last)?;
                    out.dispatched += 1;
                    traversal_id += 1;
                }
                traversal = Some((tr.cell, tr.sensors.clone()));
            }
        }
        tr.traversal_id = traversal_id;
        out.transitions.transitions.push(tr);
        history.push_action(action);
        let step_reward = reward_terms(state.pose, &[s.pose], path, d_b, action.throttle, last_throttle)
            .map_or(f64::NEG_INFINITY, |r| r.total(&cfg.weights));
        last_throttle = action.throttle;
        state = s;

        let proj = path.project(state.pose.x, state.pose.y);
        if laps.update(path, proj.s) {
            out.lap_ends.push(out.transitions.len());
        }
        let on_grid = world
            .grid
            .world_to_cell(state.pose.x, state.pose.y)
            .map(|c| world.grid.contains(c))
            .unwrap_or(false);
        let intervention = !on_grid || proj.distance > RECOVERY_DISTANCE;
        out.log.rows.push(RunLogRow {
            t: t + TRANSITION_DT,
            x: state.pose.x,
            y: state.pose.y,
            yaw: state.pose.yaw,
            vx: state.vx,
            vy: state.vy,
            yaw_rate: state.yaw_rate,
            a_th: action.throttle,
            a_st: action.steer,
            reward: step_reward,
            lap: laps.laps(),
            map_version: snapshot.version(),
            intervention: u8::from(intervention),
        });
        if intervention {
            out.interventions += 1;
            if out.interventions > cfg.max_interventions {
                return Err(PlanError::TooManyInterventions {
                    interventions: out.interventions,
                    t: t + TRANSITION_DT,
                });
            }
            if let Some((cell, last)) = traversal.take() {
                dispatch(cell, last)?;
                out.dispatched += 1;
                traversal_id += 1;
            }
            state = SimState::at_rest(path.pose_at(proj.s));
            history.clear();
            prev_solution = None;
            last_throttle = 0.0;
        }
        if laps.laps() >= cfg.laps {
            out.completed = true;
            break;
        }
    }
    Ok(out)
}
