//! Planar dynamic bicycle model with linear tires and per-axle traction
//! circles.

use serde::{Deserialize, Serialize};

use super::SimError;

pub const GRAVITY: f64 = 9.81;
/// Simulator integration period (100 Hz).
pub const SIM_DT: f64 = 0.01;
const SUBSTEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    pub wheelbase: f64,
    /// Distance from the center of gravity to the front axle.
    pub cg_to_front: f64,
    pub yaw_inertia: f64,
    pub max_steer: f64,
    /// Lateral force per radian of slip, per axle.
    pub cornering_stiffness_front: f64,
    pub cornering_stiffness_rear: f64,
    pub max_drive_force: f64,
    pub max_brake_force: f64,
    /// Drivetrain resistance `c1·v + c2·v|v|`, transmitted through the rear tires.
    pub resistance_linear: f64,
    pub resistance_quadratic: f64,
    pub wheel_radius: f64,
    /// Wheel-speed gain per newton of traction the rear tire could not transmit.
    pub spin_compliance: f64,
    pub wheel_time_constant: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 3.5,
            wheelbase: 0.36,
            cg_to_front: 0.18,
            yaw_inertia: 0.1,
            max_steer: 0.4,
            cornering_stiffness_front: 120.0,
            cornering_stiffness_rear: 120.0,
            max_drive_force: 28.0,
            max_brake_force: 28.0,
            resistance_linear: 1.0,
            resistance_quadratic: 0.6,
            wheel_radius: 0.05,
            spin_compliance: 0.2,
            wheel_time_constant: 0.05,
        }
    }
}

impl VehicleParams {
    pub fn cg_to_rear(&self) -> f64 {
        self.wheelbase - self.cg_to_front
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub throttle: f64,
    pub steer: f64,
}

impl Action {
    /// Builds an action clamped to `[-1, 1]²`.
    pub fn new(throttle: f64, steer: f64) -> Self {
        Self {
            throttle: throttle.clamp(-1.0, 1.0),
            steer: steer.clamp(-1.0, 1.0),
        }
    }

    pub fn clamped(self) -> Self {
        Self::new(self.throttle, self.steer)
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.throttle, self.steer]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    /// Applies a displacement expressed in this pose's body frame.
    pub fn compose(&self, dx: f64, dy: f64, dyaw: f64) -> Self {
        let (s, c) = self.yaw.sin_cos();
        Self {
            x: self.x + c * dx - s * dy,
            y: self.y + s * dx + c * dy,
            yaw: self.yaw + dyaw,
        }
    }

    /// Displacement from `self` to `other` in this pose's body frame.
    pub fn relative(&self, other: &Pose2) -> (f64, f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (other.x - self.x, other.y - self.y);
        (c * dx + s * dy, -s * dx + c * dy, other.yaw - self.yaw)
    }
}

/// Full simulator state. Yaw is kept unwrapped.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SimState {
    pub pose: Pose2,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
    pub ax: f64,
    pub ay: f64,
    pub yaw_acc: f64,
    pub rpm: f64,
    /// Rear wheel surface speed.
    pub wheel_speed: f64,
}

impl SimState {
    pub fn at_rest(pose: Pose2) -> Self {
        Self {
            pose,
            ..Default::default()
        }
    }

    /// `[vx, vy, yaw_rate, ax, ay, yaw_acc, rpm]`.
    pub fn input_state(&self) -> [f64; 7] {
        [self.vx, self.vy, self.yaw_rate, self.ax, self.ay, self.yaw_acc, self.rpm]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Body slip angle in radians (zero when nearly stopped).
    pub fn slip_angle(&self) -> f64 {
        if self.speed() < 0.3 {
            0.0
        } else {
            self.vy.atan2(self.vx.abs())
        }
    }

    fn is_finite(&self) -> bool {
        [
            self.pose.x,
            self.pose.y,
            self.pose.yaw,
            self.vx,
            self.vy,
            self.yaw_rate,
            self.ax,
            self.ay,
            self.yaw_acc,
            self.rpm,
            self.wheel_speed,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Scales `(fx, fy)` onto the circle of radius `limit` when it lies outside.
fn traction_clamp(fx: f64, fy: f64, limit: f64) -> (f64, f64) {
    let mag = fx.hypot(fy);
    if mag > limit && mag > 0.0 {
        let s = limit / mag;
        (fx * s, fy * s)
    } else {
        (fx, fy)
    }
}

fn substep(s: &mut SimState, action: Action, mu: f64, p: &VehicleParams, dt: f64) {
    let lf = p.cg_to_front;
    let lr = p.cg_to_rear();
    let delta = action.steer * p.max_steer;
    let normal_front = p.mass * GRAVITY * lr / p.wheelbase;
    let normal_rear = p.mass * GRAVITY * lf / p.wheelbase;

    // Lateral tire forces fade in over the first 0.2 m/s so a steered car at
    // rest stays at rest.
    let speed = s.speed();
    let fade = (speed / 0.2).min(1.0);
    let vx_eff = s.vx.max(0.5);
    let alpha_f = delta - (s.vy + lf * s.yaw_rate).atan2(vx_eff);
    let alpha_r = -(s.vy - lr * s.yaw_rate).atan2(vx_eff);
    let fyf_lin = fade * p.cornering_stiffness_front * alpha_f;
    let fyr_lin = fade * p.cornering_stiffness_rear * alpha_r;

    let drive = if action.throttle >= 0.0 {
        action.throttle * p.max_drive_force
    } else {
        action.throttle * p.max_brake_force * (s.vx / 0.2).tanh()
    };
    let resistance = p.resistance_linear * s.vx + p.resistance_quadratic * s.vx * s.vx.abs();
    let fxr_des = drive - resistance;

    let (_, fyf) = traction_clamp(0.0, fyf_lin, mu * normal_front);
    let (fxr, fyr) = traction_clamp(fxr_des, fyr_lin, mu * normal_rear);

    let (sd, cd) = delta.sin_cos();
    let fx = fxr - fyf * sd;
    let fy = fyr + fyf * cd;
    let moment = lf * fyf * cd - lr * fyr;

    let ax = fx / p.mass;
    let ay = fy / p.mass;
    let yaw_acc = moment / p.yaw_inertia;

    s.vx += (ax + s.yaw_rate * s.vy) * dt;
    s.vy += (ay - s.yaw_rate * s.vx) * dt;
    s.yaw_rate += yaw_acc * dt;

    let (sy, cy) = s.pose.yaw.sin_cos();
    s.pose.x += (s.vx * cy - s.vy * sy) * dt;
    s.pose.y += (s.vx * sy + s.vy * cy) * dt;
    s.pose.yaw += s.yaw_rate * dt;

    let unsent = (fxr_des - fxr).max(0.0);
    let wheel_target = s.vx + p.spin_compliance * unsent;
    s.wheel_speed += (wheel_target - s.wheel_speed) * (dt / p.wheel_time_constant).min(1.0);

    s.ax = ax;
    s.ay = ay;
    s.yaw_acc = yaw_acc;
    s.rpm = s.wheel_speed.max(0.0) * 60.0 / (2.0 * std::f64::consts::PI * p.wheel_radius);
}

/// Advances the vehicle by `dt` (normally [`SIM_DT`]) on a surface with
/// friction coefficient `mu`.
pub fn sim_step(state: &SimState, action: Action, mu: f64, params: &VehicleParams, dt: f64) -> Result<SimState, SimError> {
    let action = action.clamped();
    if !state.is_finite() || !mu.is_finite() || !dt.is_finite() || !action.throttle.is_finite() || !action.steer.is_finite() {
        return Err(SimError::NonFinite);
    }
    let mut s = *state;
    let h = dt / SUBSTEPS as f64;
    for _ in 0..SUBSTEPS {
        substep(&mut s, action, mu, params, h);
    }
    if !s.is_finite() {
        return Err(SimError::NonFinite);
    }
    Ok(s)
}
