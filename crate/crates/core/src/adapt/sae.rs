use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::AdaptError;
use crate::agent::Checkpoint;
use crate::autodiff::{Bound, Graph, ParamGroup, Tensor, TensorError, Var};
use crate::nn::{AffineParams, Architecture, EncoderSpec, StnSpec};

/// Spatial adaptive encoder: the trained encoder with identity-initialized
/// spatial transformers threaded in front of its first `stn_count` convs.
#[derive(Clone, Debug)]
pub struct Sae {
    pub encoder_spec: EncoderSpec,
    pub stns: Vec<StnSpec>,
    /// Transformer parameters, prefixed `stn{k}`.
    pub stn: ParamGroup,
    /// Copy of the checkpoint encoder.
    pub encoder: ParamGroup,
}

/// The SAE's parameter groups bound onto one graph.
pub struct SaeBound {
    pub encoder: Bound,
    pub stn: Bound,
}

pub struct SaeForward {
    pub latent: Var,
    /// `phis[k]` holds one coefficient vector per frame of transformer `k`.
    pub phis: Vec<Vec<Var>>,
}

pub fn stn_prefix(k: usize) -> String {
    format!("stn{k}")
}

impl Sae {
    pub fn build(ckpt: &Checkpoint, stn_count: usize, lr_stn: f64, lr_enc: f64, seed: u64) -> Result<Self, AdaptError> {
        let encoder_spec = ckpt.nets.spec.encoder.clone();
        let arch = Architecture::for_encoder(&encoder_spec).ok_or_else(|| {
            AdaptError::Config("checkpoint encoder matches no known architecture profile".into())
        })?;
        if stn_count > arch.stns.len() {
            return Err(AdaptError::Config(format!(
                "stn_count {stn_count} out of range 0..={}",
                arch.stns.len()
            )));
        }
        let stns = arch.stns[..stn_count].to_vec();
        let mut stn = ParamGroup::new("stn", lr_stn)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (k, s) in stns.iter().enumerate() {
            s.init(&mut stn, &stn_prefix(k), &mut rng)?;
        }
        let mut encoder = ckpt.nets.encoder.clone();
        encoder.set_learning_rate(lr_enc)?;
        encoder.reset_optimizer();
        Ok(Self {
            encoder_spec,
            stns,
            stn,
            encoder,
        })
    }

    pub fn stn_count(&self) -> usize {
        self.stns.len()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> SaeBound {
        SaeBound {
            encoder: g.bind(&self.encoder, trainable),
            stn: g.bind(&self.stn, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &SaeBound, obs: Var) -> Result<SaeForward, TensorError> {
        let mut phis = Vec::with_capacity(self.stns.len());
        let stns = &self.stns;
        let ps = &b.stn;
        let latent = self.encoder_spec.forward_with(g, &b.encoder, obs, &mut |g, stage, x| match stns.get(stage) {
            Some(s) => {
                let out = s.forward(g, ps, &stn_prefix(stage), x)?;
                phis.push(out.phis);
                Ok(out.output)
            }
            None => Ok(x),
        })?;
        Ok(SaeForward { latent, phis })
    }

    /// Latent and per-transformer, per-frame coefficients of one
    /// observation, without gradient tracking.
    pub fn encode(&self, obs: &Tensor) -> Result<(Vec<f64>, Vec<Vec<AffineParams>>), TensorError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.input(obs.clone());
        let out = self.forward(&mut g, &b, x)?;
        let phis = out
            .phis
            .iter()
            .map(|frames| frames.iter().map(|&v| AffineParams::from_slice(g.data(v))).collect::<Result<Vec<_>, _>>())
            .collect::<Result<_, _>>()?;
        Ok((g.data(out.latent).to_vec(), phis))
    }
}
