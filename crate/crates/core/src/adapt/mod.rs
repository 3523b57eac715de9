//! Reward-free test-time adaptation of the encoder against the frozen latent
//! dynamics model, plus the baseline and ablation variants.

mod buffer;
mod run;
mod sae;

pub use buffer::RingBuffer;
pub use run::{adapt_loss, affine_probe, run_adaptation, AdaptLog, AdaptOutcome, LogRow};
pub use sae::{stn_prefix, Sae, SaeBound, SaeForward};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::AgentError;
use crate::autodiff::{AdamConfig, ParamGroup, TensorError};
use crate::world::WorldError;

/// Encoder learning rate used for the xArm tasks instead of the default.
pub const XARM_ENCODER_LR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("invalid adaptation config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// No updates.
    None,
    /// Encoder only, no transformers, frozen dynamics.
    Dm,
    /// Transformers, encoder and inverse-dynamics head on the action-prediction loss.
    IdmStn,
    /// Transformers and encoder against the frozen dynamics.
    Movie,
    /// As `Movie`, with the dynamics model trained as well.
    FinetuneDm,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::None, Method::Dm, Method::IdmStn, Method::Movie, Method::FinetuneDm];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Dm => "dm",
            Method::IdmStn => "idm_stn",
            Method::Movie => "movie",
            Method::FinetuneDm => "finetune_dm",
        }
    }

    pub fn updates(self) -> bool {
        self != Method::None
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = AdaptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AdaptError::Config(format!("unknown method `{s}` (expected none, dm, idm_stn, movie, finetune_dm)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub buffer_size: usize,
    pub batch: usize,
    pub updates_per_step: usize,
    pub lr_stn: f64,
    pub lr_enc: f64,
    /// Learning rate of the inverse-dynamics head (`idm_stn`) or the
    /// dynamics model (`finetune_dm`).
    pub lr_head: f64,
    pub episodes: usize,
    pub method: Method,
    pub stn_count: usize,
    /// Detach the next-step latent in the view loss.
    pub stop_gradient_target: bool,
    pub adam: AdamConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            buffer_size: 256,
            batch: 32,
            updates_per_step: 32,
            lr_stn: 1e-5,
            lr_enc: 1e-7,
            lr_head: 1e-5,
            episodes: 20,
            method: Method::Movie,
            stn_count: 2,
            stop_gradient_target: false,
            adam: AdamConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.buffer_size == 0 || self.batch == 0 || self.batch > self.buffer_size {
            return Err(AdaptError::Config(format!(
                "need 0 < batch ({}) <= buffer_size ({})",
                self.batch, self.buffer_size
            )));
        }
        for (name, lr) in [("lr_stn", self.lr_stn), ("lr_enc", self.lr_enc), ("lr_head", self.lr_head)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(AdaptError::Config(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        if self.stn_count > 4 {
            return Err(AdaptError::Config(format!("stn_count {} out of range 0..=4", self.stn_count)));
        }
        Ok(())
    }

    /// Transformers actually inserted: the `dm` baseline never has any.
    pub fn effective_stn_count(&self) -> usize {
        if self.method == Method::Dm {
            0
        } else {
            self.stn_count
        }
    }
}

/// Hex SHA-256 of a group's parameter bytes.
pub fn param_checksum(group: &ParamGroup) -> String {
    crate::agent::hex(&Sha256::digest(group.param_bytes()))
}

/// The trained dynamics model, read-only. The checksum is taken at
/// construction so later tampering is detectable.
#[derive(Clone, Debug)]
pub struct FrozenDynamics {
    params: ParamGroup,
    checksum: String,
}

impl FrozenDynamics {
    pub fn new(params: ParamGroup) -> Self {
        let checksum = param_checksum(&params);
        Self { params, checksum }
    }

    pub fn params(&self) -> &ParamGroup {
        &self.params
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recomputes the checksum and compares it with the one taken at construction.
    pub fn verify(&self) -> bool {
        param_checksum(&self.params) == self.checksum
    }
}
