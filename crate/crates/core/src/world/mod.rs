//! A 2D reach task seen through an affine camera.
//!
//! The agent (red disc) must move to the goal (green disc) over a checkered
//! board. Actions are per-axis displacements bounded by [`MAX_ACTION`]. The
//! camera can be shifted, rotated and zoomed to produce the evaluation view
//! settings in [`camera`].

pub mod camera;
pub mod dataset;
mod env;
mod render;

pub use camera::{camera_pose_at, CameraPose, NovelLevel, ViewSetting};
pub use dataset::{Dataset, EpisodeData};
pub use env::{episode_seed, rollout, EpisodeTrace, Observation, StepOutcome, Transition, ViewEnv};
pub use render::render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::AffineParams;

pub const MAX_ACTION: f64 = 0.1;
pub const SUCCESS_RADIUS: f64 = 0.1;
pub const MIN_SEPARATION: f64 = 0.4;
pub const GOAL_EXTENT: f64 = 0.6;
pub const DISC_RADIUS: f64 = 0.08;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("{0}")]
    Setting(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed shard {path}: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Side length of rendered frames in pixels.
    pub image_size: usize,
    /// Half-width of the world square visible under the training camera.
    pub view_half_extent: f64,
    pub horizon: usize,
    pub framestack: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 84,
            view_half_extent: 1.1,
            horizon: 50,
            framestack: 3,
        }
    }
}

impl WorldConfig {
    pub fn with_image_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }

    /// World units per pixel under the training camera.
    pub fn pixel_size(&self) -> f64 {
        2.0 * self.view_half_extent / self.image_size as f64
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.image_size < 2 || self.horizon == 0 || self.framestack == 0 || !(self.view_half_extent > 0.0) {
            return Err(WorldError::Setting(format!("invalid world config {self:?}")));
        }
        Ok(())
    }

    /// Normalized image coordinates of a camera-plane point.
    pub fn plane_to_normalized(&self, q: [f64; 2]) -> [f64; 2] {
        let n = self.image_size as f64;
        [q[0] / self.view_half_extent + 1.0 / n, -q[1] / self.view_half_extent + 1.0 / n]
    }

    pub fn normalized_to_plane(&self, x: [f64; 2]) -> [f64; 2] {
        let n = self.image_size as f64;
        [(x[0] - 1.0 / n) * self.view_half_extent, -(x[1] - 1.0 / n) * self.view_half_extent]
    }

    /// The affine map `A` such that sampling an image taken from `test` at
    /// `A * x` reproduces the image taken from `train` at normalized point `x`.
    pub fn view_affine(&self, train: &CameraPose, test: &CameraPose) -> AffineParams {
        let map = |x: [f64; 2]| {
            let world = train.plane_to_world(self.normalized_to_plane(x));
            self.plane_to_normalized(test.world_to_plane(world))
        };
        let o = map([0.0, 0.0]);
        let ex = map([1.0, 0.0]);
        let ey = map([0.0, 1.0]);
        AffineParams([ex[0] - o[0], ey[0] - o[0], o[0], ex[1] - o[1], ey[1] - o[1], o[1]])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent: [f64; 2],
    pub goal: [f64; 2],
    pub step_index: usize,
}

impl WorldState {
    pub fn distance(&self) -> f64 {
        (self.agent[0] - self.goal[0]).hypot(self.agent[1] - self.goal[1])
    }

    pub fn is_success(&self) -> bool {
        self.distance() < SUCCESS_RADIUS
    }
}

/// Agent uniform on `[-1,1]^2`, goal uniform on `[-0.6,0.6]^2`, resampled
/// until they are at least 0.4 apart.
pub fn reset(seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let agent = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        let goal = [rng.gen_range(-GOAL_EXTENT..=GOAL_EXTENT), rng.gen_range(-GOAL_EXTENT..=GOAL_EXTENT)];
        let s = WorldState {
            agent,
            goal,
            step_index: 0,
        };
        if s.distance() >= MIN_SEPARATION {
            return s;
        }
    }
}

pub fn clamp_action(a: [f64; 2]) -> [f64; 2] {
    a.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-MAX_ACTION, MAX_ACTION) })
}

/// Applies a clamped action; returns the new state and whether it reached the goal.
pub fn step(state: &WorldState, action: [f64; 2]) -> (WorldState, bool) {
    let a = clamp_action(action);
    let next = WorldState {
        agent: [(state.agent[0] + a[0]).clamp(-1.0, 1.0), (state.agent[1] + a[1]).clamp(-1.0, 1.0)],
        goal: state.goal,
        step_index: state.step_index + 1,
    };
    let success = next.is_success();
    (next, success)
}

pub fn expert_action(state: &WorldState) -> [f64; 2] {
    clamp_action([state.goal[0] - state.agent[0], state.goal[1] - state.agent[1]])
}
