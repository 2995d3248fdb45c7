//! Randomized pure-pursuit driver used to collect training data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::track::Path;
use super::vehicle::{Action, SimState, VehicleParams};

/// Burst length in 10 Hz ticks.
pub const BURST_TICKS: u32 = 10;

#[derive(Clone, Debug)]
pub struct ExpertConfig {
    pub max_speed: f64,
    /// Range the lateral acceleration target is redrawn from.
    pub lat_acc_range: (f64, f64),
    /// Mean time between lateral acceleration target redraws.
    pub retarget_period: f64,
    /// Stationary std of the lateral line offset.
    pub offset_std: f64,
    pub offset_time_constant: f64,
    pub speed_gain: f64,
    /// Probability per control tick of starting a full-throttle burst.
    pub burst_prob: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            max_speed: 4.0,
            lat_acc_range: (2.0, 6.0),
            retarget_period: 5.0,
            offset_std: 0.15,
            offset_time_constant: 2.0,
            speed_gain: 0.8,
            // 0.1 per second at 10 Hz
            burst_prob: 0.01,
        }
    }
}

/// Stateful expert: carries the line offset, the speed target and any active burst.
#[derive(Clone, Debug)]
pub struct ExpertDriver {
    cfg: ExpertConfig,
    rng: ChaCha8Rng,
    offset: f64,
    lat_acc: f64,
    burst_left: u32,
}

impl ExpertDriver {
    pub fn new(cfg: ExpertConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lat_acc = rng.random_range(cfg.lat_acc_range.0..=cfg.lat_acc_range.1);
        Self {
            cfg,
            rng,
            offset: 0.0,
            lat_acc,
            burst_left: 0,
        }
    }

    pub fn in_burst(&self) -> bool {
        self.burst_left > 0
    }

    /// Next 10 Hz action; `dt` is the control period.
    pub fn act(&mut self, state: &SimState, path: &Path, vehicle: &VehicleParams, dt: f64) -> Action {
        let cfg = &self.cfg;
        let a = (-dt / cfg.offset_time_constant).exp();
        let n: f64 = self.rng.sample(StandardNormal);
        self.offset = (a * self.offset + cfg.offset_std * (1.0 - a * a).sqrt() * n).clamp(-0.35, 0.35);
        if self.rng.random_bool((dt / cfg.retarget_period).min(1.0)) {
            self.lat_acc = self.rng.random_range(cfg.lat_acc_range.0..=cfg.lat_acc_range.1);
        }
        if self.burst_left > 0 {
            self.burst_left -= 1;
        } else if self.rng.random_bool(cfg.burst_prob) {
            self.burst_left = BURST_TICKS - 1;
            return self.steer_only(state, path, vehicle, 1.0);
        }
        if self.burst_left > 0 {
            return self.steer_only(state, path, vehicle, 1.0);
        }

        let v = state.vx.max(0.0);
        let proj = path.project(state.pose.x, state.pose.y);
        let kappa = path.max_curvature_between(proj.s, proj.s + 1.0 + 0.6 * v);
        let v_target = (self.lat_acc / kappa.max(1e-6)).sqrt().min(cfg.max_speed);
        let feed_forward = (vehicle.resistance_linear * v + vehicle.resistance_quadratic * v * v) / vehicle.max_drive_force;
        let throttle = feed_forward + cfg.speed_gain * (v_target - v);
        self.steer_only(state, path, vehicle, throttle)
    }

    fn steer_only(&self, state: &SimState, path: &Path, vehicle: &VehicleParams, throttle: f64) -> Action {
        Action::new(throttle, pure_pursuit(state, path, vehicle, self.offset))
    }
}

/// Normalized steering command toward a point ahead on the path shifted by
/// `offset` to the left.
pub fn pure_pursuit(state: &SimState, path: &Path, vehicle: &VehicleParams, offset: f64) -> f64 {
    let v = state.vx.max(0.0);
    let lookahead = 0.5 + 0.3 * v;
    let proj = path.project(state.pose.x, state.pose.y);
    let ((px, py), (tx, ty)) = path.point_at(proj.s + lookahead);
    let (gx, gy) = (px - ty * offset, py + tx * offset);
    let (s, c) = state.pose.yaw.sin_cos();
    let (dx, dy) = (gx - state.pose.x, gy - state.pose.y);
    let (bx, by) = (c * dx + s * dy, -s * dx + c * dy);
    let d2 = bx * bx + by * by;
    if d2 < 1e-12 {
        return 0.0;
    }
    let curvature = 2.0 * by / d2;
    let delta = (curvature * vehicle.wheelbase).atan();
    (delta / vehicle.max_steer).clamp(-1.0, 1.0)
}
