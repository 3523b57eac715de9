use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{camera_pose_at, clamp_action, render, reset, step, CameraPose, ViewSetting, WorldConfig, WorldState};
use crate::autodiff::Tensor;

/// Stacked frames, oldest first: `[3 * framestack, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub frames: Tensor,
}

impl Observation {
    /// Concatenates `[3, N, N]` frames along the channel axis.
    pub fn stack<'a>(frames: impl IntoIterator<Item = &'a Tensor>) -> Observation {
        let mut data = Vec::new();
        let mut count = 0;
        let mut hw = (0, 0);
        for f in frames {
            hw = (f.shape()[1], f.shape()[2]);
            data.extend_from_slice(f.data());
            count += f.shape()[0];
        }
        Observation {
            frames: Tensor::new([count, hw.0, hw.1], data).expect("frame stack"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: [f64; 2],
    pub next_obs: Observation,
    pub success: bool,
}

/// What the environment reveals after a step. There is deliberately no reward.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_obs: Observation,
    pub success: bool,
    pub done: bool,
}

/// Derives the seed of episode `index` of a run seeded with `base`.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One episode of the reach task under a view setting.
#[derive(Clone, Debug)]
pub struct ViewEnv {
    cfg: WorldConfig,
    setting: ViewSetting,
    state: WorldState,
    camera_rng: ChaCha8Rng,
    pose: CameraPose,
    frames: VecDeque<Tensor>,
    done: bool,
}

impl ViewEnv {
    pub fn new(cfg: &WorldConfig, setting: ViewSetting, seed: u64) -> Self {
        let state = reset(seed);
        let mut camera_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA3E_2A00_0000_0001);
        let pose = camera_pose_at(&setting, 0, &mut camera_rng);
        let first = render(&state, &pose, cfg);
        let frames = std::iter::repeat(first).take(cfg.framestack).collect();
        Self {
            cfg: cfg.clone(),
            setting,
            state,
            camera_rng,
            pose,
            frames,
            done: false,
        }
    }

    pub fn observation(&self) -> Observation {
        Observation::stack(&self.frames)
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }

    pub fn setting(&self) -> &ViewSetting {
        &self.setting
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// The newest rendered frame.
    pub fn frame(&self) -> &Tensor {
        self.frames.back().expect("framestack is non-empty")
    }

    pub fn step(&mut self, action: [f64; 2]) -> StepOutcome {
        assert!(!self.done, "step on a finished episode");
        let (next, success) = step(&self.state, action);
        self.state = next;
        self.pose = camera_pose_at(&self.setting, next.step_index, &mut self.camera_rng);
        self.frames.pop_front();
        self.frames.push_back(render(&self.state, &self.pose, &self.cfg));
        self.done = success || next.step_index >= self.cfg.horizon;
        StepOutcome {
            next_obs: self.observation(),
            success,
            done: self.done,
        }
    }
}

/// Rendered frames, actions and states of one finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    /// `steps + 1` frames, one per visited state.
    pub frames: Vec<Tensor>,
    pub actions: Vec<[f64; 2]>,
    pub states: Vec<WorldState>,
    pub success: bool,
    pub framestack: usize,
}

impl EpisodeTrace {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    /// Observation at step `t`, with the first frame repeated before the episode start.
    pub fn observation(&self, t: usize) -> Observation {
        let k = self.framestack;
        Observation::stack((0..k).map(|i| &self.frames[(t + i + 1).saturating_sub(k)]))
    }

    pub fn transition(&self, t: usize) -> Transition {
        Transition {
            obs: self.observation(t),
            action: self.actions[t],
            next_obs: self.observation(t + 1),
            success: self.success && t + 1 == self.steps(),
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.steps()).map(|t| self.transition(t))
    }
}

/// Runs `episodes` episodes of `policy` under `setting`. The policy sees the
/// observation and the true state (the scripted expert needs the latter;
/// learned policies ignore it).
pub fn rollout<P>(mut policy: P, setting: ViewSetting, episodes: usize, seed: u64, cfg: &WorldConfig) -> Vec<EpisodeTrace>
where
    P: FnMut(&Observation, &WorldState) -> [f64; 2],
{
    (0..episodes)
        .map(|e| {
            let mut env = ViewEnv::new(cfg, setting, episode_seed(seed, e as u64));
            let mut trace = EpisodeTrace {
                frames: vec![env.frame().clone()],
                actions: vec![],
                states: vec![*env.state()],
                success: false,
                framestack: cfg.framestack,
            };
            while !env.is_done() {
                let a = clamp_action(policy(&env.observation(), env.state()));
                let out = env.step(a);
                trace.actions.push(a);
                trace.frames.push(env.frame().clone());
                trace.states.push(*env.state());
                trace.success = out.success;
            }
            trace
        })
        .collect()
}
