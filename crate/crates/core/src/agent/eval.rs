use serde::{Deserialize, Serialize};

use super::{encode, latent_dynamics_error, policy_action, AgentError, AgentNets, Checkpoint};
use crate::autodiff::{Graph, Tensor, TensorError};
use crate::world::{clamp_action, episode_seed, Observation, ViewEnv, ViewSetting, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub success: bool,
    pub steps: usize,
    /// Latent-dynamics error of the episode's last transition.
    pub final_dyn_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_final_dyn_loss: f64,
}

impl Metrics {
    pub fn from_episodes(eps: &[EpisodeResult]) -> Self {
        let n = eps.len().max(1) as f64;
        Self {
            success_rate: eps.iter().filter(|e| e.success).count() as f64 / n,
            mean_steps: eps.iter().map(|e| e.steps as f64).sum::<f64>() / n,
            mean_final_dyn_loss: eps.iter().map(|e| e.final_dyn_loss).sum::<f64>() / n,
        }
    }
}

/// Policy action for a latent.
pub fn act_latent(nets: &AgentNets, z: &[f64]) -> Result<[f64; 2], TensorError> {
    let mut g = Graph::new();
    let p = g.bind(&nets.policy, false);
    let zv = g.input(Tensor::vector(z.to_vec()));
    let a = policy_action(&nets.spec, &mut g, &p, zv)?;
    let d = g.data(a);
    Ok(clamp_action([d[0], d[1]]))
}

/// `pi(h(obs))`
pub fn act(ckpt: &Checkpoint, obs: &Observation) -> Result<[f64; 2], TensorError> {
    let z = encode(&ckpt.nets, &obs.frames)?;
    act_latent(&ckpt.nets, &z)
}

/// Rolls out the pretrained policy with no adaptation. Episode `e` uses
/// world seed `episode_seed(seed, e)`.
pub fn evaluate(
    ckpt: &Checkpoint,
    setting: ViewSetting,
    episodes: usize,
    seed: u64,
    cfg: &WorldConfig,
) -> Result<(Metrics, Vec<EpisodeResult>), AgentError> {
    setting.validate()?;
    let nets = &ckpt.nets;
    let mut results = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut env = ViewEnv::new(cfg, setting, episode_seed(seed, e as u64));
        let mut z = encode(nets, &env.observation().frames)?;
        let mut last_loss = 0.0;
        let mut steps = 0;
        let mut success = false;
        while !env.is_done() {
            let a = act_latent(nets, &z)?;
            let out = env.step(a);
            let z_next = encode(nets, &out.next_obs.frames)?;
            last_loss = latent_dynamics_error(nets, &z, a, &z_next)?;
            z = z_next;
            steps += 1;
            success = out.success;
        }
        results.push(EpisodeResult {
            episode: e,
            success,
            steps,
            final_dyn_loss: last_loss,
        });
    }
    Ok((Metrics::from_episodes(&results), results))
}
