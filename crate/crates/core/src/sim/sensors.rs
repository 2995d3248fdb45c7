//! Synthetic camera and microphone features plus state/action histories.

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::vehicle::{Action, SimState};
use super::World;

pub const FEATURE_DIM: usize = 16;
pub const HISTORY_LEN: usize = 10;
pub const STATE_DIM: usize = 7;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub noise_std: f64,
    /// Distance ahead of the car at which the camera reads the surface.
    pub camera_lookahead: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            camera_lookahead: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorBundle {
    pub image_feat: [f64; FEATURE_DIM],
    pub audio_feat: [f64; FEATURE_DIM],
    /// Oldest row first; the last row is the current input state.
    pub state_hist: [[f64; STATE_DIM]; HISTORY_LEN],
    /// Oldest row first; the last row is the action applied just before now.
    pub action_hist: [[f64; ACTION_DIM]; HISTORY_LEN],
}

impl Default for SensorBundle {
    fn default() -> Self {
        Self {
            image_feat: [0.0; FEATURE_DIM],
            audio_feat: [0.0; FEATURE_DIM],
            state_hist: [[0.0; STATE_DIM]; HISTORY_LEN],
            action_hist: [[0.0; ACTION_DIM]; HISTORY_LEN],
        }
    }
}

impl SensorBundle {
    pub fn state_hist_flat(&self) -> Vec<f64> {
        self.state_hist.iter().flatten().copied().collect()
    }

    pub fn action_hist_flat(&self) -> Vec<f64> {
        self.action_hist.iter().flatten().copied().collect()
    }
}

/// Camera and microphone projections of one material.
#[derive(Clone, Debug, PartialEq)]
pub struct Signature {
    pub image: [f64; FEATURE_DIM],
    pub audio: [f64; FEATURE_DIM],
}

impl Signature {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = [0.0; FEATURE_DIM];
        let mut audio = [0.0; FEATURE_DIM];
        for v in image.iter_mut().chain(audio.iter_mut()) {
            *v = rng.sample(StandardNormal);
        }
        Self { image, audio }
    }
}

/// Microphone gain as a function of speed.
pub fn audio_gain(speed: f64) -> f64 {
    0.2 + 0.8 * speed.tanh()
}

/// Rolling state and action history, zero-padded until filled.
#[derive(Clone, Debug, Default)]
pub struct HistoryBuffer {
    states: VecDeque<[f64; STATE_DIM]>,
    actions: VecDeque<[f64; ACTION_DIM]>,
}

impl HistoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.states.clear();
        self.actions.clear();
    }

    pub fn push_state(&mut self, s: [f64; STATE_DIM]) {
        if self.states.len() == HISTORY_LEN {
            self.states.pop_front();
        }
        self.states.push_back(s);
    }

    pub fn push_action(&mut self, a: Action) {
        if self.actions.len() == HISTORY_LEN {
            self.actions.pop_front();
        }
        self.actions.push_back(a.to_array());
    }

    fn fill<const D: usize>(src: &VecDeque<[f64; D]>) -> [[f64; D]; HISTORY_LEN] {
        let mut out = [[0.0; D]; HISTORY_LEN];
        let pad = HISTORY_LEN - src.len();
        for (i, row) in src.iter().enumerate() {
            out[pad + i] = *row;
        }
        out
    }
}

/// Renders the sensor bundle for the car in `state`.
///
/// The history buffer should already contain the current input state.
pub fn render_sensors<R: Rng + ?Sized>(state: &SimState, world: &World, history: &HistoryBuffer, rng: &mut R) -> SensorBundle {
    let cfg = &world.sensors;
    let (sy, cy) = state.pose.yaw.sin_cos();
    let ahead = (
        state.pose.x + cfg.camera_lookahead * cy,
        state.pose.y + cfg.camera_lookahead * sy,
    );
    let img_sig = &world.signature(world.material_id_at(ahead.0, ahead.1)).image;
    let aud_sig = &world.signature(world.material_id_at(state.pose.x, state.pose.y)).audio;
    let gain = audio_gain(state.speed());

    let mut bundle = SensorBundle {
        state_hist: HistoryBuffer::fill(&history.states),
        action_hist: HistoryBuffer::fill(&history.actions),
        ..Default::default()
    };
    for i in 0..FEATURE_DIM {
        let (n1, n2): (f64, f64) = if cfg.noise_std > 0.0 {
            (rng.sample(StandardNormal), rng.sample(StandardNormal))
        } else {
            (0.0, 0.0)
        };
        bundle.image_feat[i] = img_sig[i] + cfg.noise_std * n1;
        bundle.audio_feat[i] = gain * aud_sig[i] + cfg.noise_std * n2;
    }
    bundle
}
