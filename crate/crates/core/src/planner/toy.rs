//! Planar double integrator with analytic dynamics, used to check [`icem`]
//! in isolation from the learned model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{icem, shift_solution, IcemConfig, PlanError, SequenceScorer};
use crate::sim::Action;

/// Point mass driven by accelerations in `[-1, 1]²`.
#[derive(Clone, Debug)]
pub struct DoubleIntegrator {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    pub dt: f64,
    /// Cost weight of speed against distance to the goal.
    pub speed_weight: f64,
}

impl Default for DoubleIntegrator {
    fn default() -> Self {
        Self {
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            goal: [1.2, -0.9],
            dt: 0.25,
            speed_weight: 0.6,
        }
    }
}

impl DoubleIntegrator {
    pub fn step(pos: &mut [f64; 2], vel: &mut [f64; 2], a: Action, dt: f64) {
        let acc = a.to_array();
        for d in 0..2 {
            pos[d] += vel[d] * dt + 0.5 * acc[d] * dt * dt;
            vel[d] += acc[d] * dt;
        }
    }

    pub fn goal_distance(&self) -> f64 {
        (self.pos[0] - self.goal[0]).hypot(self.pos[1] - self.goal[1])
    }
}

impl SequenceScorer for DoubleIntegrator {
    type Info = ();

    fn score(&mut self, seqs: &[Vec<Action>]) -> Result<Vec<(f64, ())>, PlanError> {
        Ok(seqs
            .iter()
            .map(|seq| {
                let (mut p, mut v) = (self.pos, self.vel);
                let mut cost = 0.0;
                for &a in seq {
                    Self::step(&mut p, &mut v, a, self.dt);
                    cost += (p[0] - self.goal[0]).hypot(p[1] - self.goal[1]) + self.speed_weight * v[0].hypot(v[1]);
                }
                (-cost, ())
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub initial_distance: f64,
    pub final_distance: f64,
    /// Best elite score never dropped between iterations of any plan call.
    pub elites_monotone: bool,
    /// Every executed action stayed inside `[-1, 1]²`.
    pub actions_bounded: bool,
}

/// Closed-loop iCEM with shift-initialization for `steps` control steps.
pub fn run_double_integrator(cfg: &IcemConfig, mut sys: DoubleIntegrator, steps: usize, seed: u64) -> Result<ToyRun, PlanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial_distance = sys.goal_distance();
    let mut prev: Option<Vec<Action>> = None;
    let mut elites_monotone = true;
    let mut actions_bounded = true;
    for _ in 0..steps {
        let out = icem(cfg, &mut sys, prev.as_deref(), &mut rng)?;
        elites_monotone &= out.best_per_iteration.windows(2).all(|w| w[1] >= w[0]);
        let a = out.best[0];
        actions_bounded &= a.throttle.abs() <= 1.0 && a.steer.abs() <= 1.0;
        let (mut p, mut v) = (sys.pos, sys.vel);
        DoubleIntegrator::step(&mut p, &mut v, a, sys.dt);
        sys.pos = p;
        sys.vel = v;
        prev = Some(shift_solution(&out.best));
    }
    Ok(ToyRun {
        initial_distance,
        final_distance: sys.goal_distance(),
        elites_monotone,
        actions_bounded,
    })
}
