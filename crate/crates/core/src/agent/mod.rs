//! Training-time backbone: encoder, latent dynamics, policy and inverse
//! dynamics heads, trained jointly on expert data from the training view.

mod checkpoint;
mod eval;
mod train;

pub(crate) use checkpoint::hex;
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use eval::{act, act_latent, evaluate, EpisodeResult, Metrics};
pub use train::{
    dynamics_loss, pretrain, pretrain_with, shift_observation, StepLosses, TrainConfig, TrainReport, MIN_TRAIN_TRANSITIONS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamGroup, Tensor, TensorError, Var};
use crate::nn::{EncoderSpec, MlpSpec, OutputActivation};
use crate::world::{WorldError, MAX_ACTION};

pub const LATENT_DIM: usize = 50;
pub const ACTION_DIM: usize = 2;
pub const HIDDEN: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("dataset too small: {count} transitions, at least {required} required")]
    DatasetTooSmall { count: usize, required: usize },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
}

/// Layer layout of the four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub encoder: EncoderSpec,
    pub dynamics: MlpSpec,
    pub policy: MlpSpec,
    pub idm: MlpSpec,
}

impl AgentSpec {
    pub fn new(encoder: EncoderSpec) -> Self {
        let z = encoder.latent_dim;
        Self {
            encoder,
            dynamics: MlpSpec::new([z + ACTION_DIM, HIDDEN, HIDDEN, z], OutputActivation::Identity),
            policy: MlpSpec::new([z, HIDDEN, ACTION_DIM], OutputActivation::ScaledTanh(MAX_ACTION)),
            idm: MlpSpec::new([2 * z, HIDDEN, ACTION_DIM], OutputActivation::ScaledTanh(MAX_ACTION)),
        }
    }
}

/// Parameters of the four networks, one group each.
#[derive(Clone, Debug)]
pub struct AgentNets {
    pub spec: AgentSpec,
    pub encoder: ParamGroup,
    pub dynamics: ParamGroup,
    pub policy: ParamGroup,
    pub idm: ParamGroup,
}

pub const DYNAMICS_PREFIX: &str = "dyn";
pub const POLICY_PREFIX: &str = "pi";
pub const IDM_PREFIX: &str = "idm";

impl AgentNets {
    pub fn init(spec: AgentSpec, lr: f64, seed: u64) -> Result<Self, AgentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = ParamGroup::new("encoder", lr)?;
        spec.encoder.init(&mut encoder, &mut rng)?;
        let mut dynamics = ParamGroup::new("dynamics", lr)?;
        spec.dynamics.init(&mut dynamics, DYNAMICS_PREFIX, &mut rng);
        let mut policy = ParamGroup::new("policy", lr)?;
        spec.policy.init(&mut policy, POLICY_PREFIX, &mut rng);
        let mut idm = ParamGroup::new("idm", lr)?;
        spec.idm.init(&mut idm, IDM_PREFIX, &mut rng);
        Ok(Self {
            spec,
            encoder,
            dynamics,
            policy,
            idm,
        })
    }

    pub fn groups(&self) -> [&ParamGroup; 4] {
        [&self.encoder, &self.dynamics, &self.policy, &self.idm]
    }

    pub fn groups_mut(&mut self) -> [&mut ParamGroup; 4] {
        [&mut self.encoder, &mut self.dynamics, &mut self.policy, &mut self.idm]
    }
}

/// `d(z, a)`
pub fn predict_next(spec: &AgentSpec, g: &mut Graph, p: &Bound, z: Var, action: Var) -> Result<Var, TensorError> {
    let za = g.concat(&[z, action])?;
    spec.dynamics.forward(g, p, DYNAMICS_PREFIX, za)
}

pub fn policy_action(spec: &AgentSpec, g: &mut Graph, p: &Bound, z: Var) -> Result<Var, TensorError> {
    spec.policy.forward(g, p, POLICY_PREFIX, z)
}

/// `idm(z_t, z_{t+1})`
pub fn inverse_action(spec: &AgentSpec, g: &mut Graph, p: &Bound, z: Var, z_next: Var) -> Result<Var, TensorError> {
    let zz = g.concat(&[z, z_next])?;
    spec.idm.forward(g, p, IDM_PREFIX, zz)
}

/// Latent of a single observation, computed without gradient tracking.
pub fn encode(nets: &AgentNets, obs: &Tensor) -> Result<Vec<f64>, TensorError> {
    let mut g = Graph::new();
    let p = g.bind(&nets.encoder, false);
    let x = g.input(obs.clone());
    let z = nets.spec.encoder.forward(&mut g, &p, x)?;
    Ok(g.data(z).to_vec())
}

/// Latent-dynamics prediction error `mse(d(z, a), z_next)` for given latents.
pub fn latent_dynamics_error(nets: &AgentNets, z: &[f64], action: [f64; 2], z_next: &[f64]) -> Result<f64, TensorError> {
    dynamics_error(&nets.spec, &nets.dynamics, z, action, z_next)
}

/// As [`latent_dynamics_error`] with an explicit dynamics parameter group.
pub fn dynamics_error(
    spec: &AgentSpec,
    dynamics: &ParamGroup,
    z: &[f64],
    action: [f64; 2],
    z_next: &[f64],
) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let p = g.bind(dynamics, false);
    let zv = g.input(Tensor::vector(z.to_vec()));
    let av = g.input(Tensor::vector(action.to_vec()));
    let target = g.input(Tensor::vector(z_next.to_vec()));
    let pred = predict_next(spec, &mut g, &p, zv, av)?;
    let l = g.mse_loss(pred, target)?;
    Ok(g.value(l).item())
}
