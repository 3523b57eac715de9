use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{inverse_action, policy_action, predict_next, AgentError, AgentNets, AgentSpec, Checkpoint};
use crate::autodiff::{AdamConfig, Bound, Graph, Tensor, TensorError, Var};
use crate::nn::EncoderSpec;
use crate::world::Dataset;

pub const MIN_TRAIN_TRANSITIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Maximum random shift in pixels applied to training observations.
    pub shift_aug_pixels: usize,
    pub lambda_dyn: f64,
    pub lambda_bc: f64,
    pub lambda_idm: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 64,
            steps: 8_000,
            shift_aug_pixels: 2,
            lambda_dyn: 1.0,
            // Actions are bounded by 0.1, so this is action MSE in units of the bound.
            lambda_bc: 100.0,
            lambda_idm: 100.0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let positive = [self.lr, self.lambda_dyn, self.lambda_bc, self.lambda_idm];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.batch == 0 {
            return Err(AgentError::Config(format!("train config values must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub dynamics: f64,
    pub bc: f64,
    pub idm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<StepLosses>,
}

/// Shifts a `[C, H, W]` map by `(dx, dy)` pixels with edge replication
/// (equivalent to replicate-padding then cropping).
pub fn shift_observation(data: &[f64], c: usize, h: usize, w: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        for i in 0..h {
            let si = (i as i64 + dy).clamp(0, h as i64 - 1) as usize;
            for j in 0..w {
                let sj = (j as i64 + dx).clamp(0, w as i64 - 1) as usize;
                out[(ch * h + i) * w + j] = data[(ch * h + si) * w + sj];
            }
        }
    }
    out
}

struct Sample {
    obs: Tensor,
    next_obs: Tensor,
    action: [f64; 2],
}

fn sample_batch(ds: &Dataset, index: &[(usize, usize)], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let p = cfg.shift_aug_pixels as i64;
    (0..cfg.batch)
        .map(|_| {
            let (e, t) = index[rng.gen_range(0..index.len())];
            let (dx, dy) = if p > 0 {
                (rng.gen_range(-p..=p), rng.gen_range(-p..=p))
            } else {
                (0, 0)
            };
            // The same shift for both observations keeps their relative geometry.
            let aug = |t: Tensor| {
                let s = t.shape().to_vec();
                if dx == 0 && dy == 0 {
                    return t;
                }
                Tensor::new(s.clone(), shift_observation(t.data(), s[0], s[1], s[2], dx, dy)).expect("same shape")
            };
            Sample {
                obs: aug(ds.observation(e, t).frames),
                next_obs: aug(ds.observation(e, t + 1).frames),
                action: ds.episodes[e].actions[t],
            }
        })
        .collect()
}

fn batch_loss(
    nets: &AgentNets,
    g: &mut Graph,
    batch: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Var, StepLosses, Bound), TensorError> {
    let spec = &nets.spec;
    let pe = g.bind(&nets.encoder, true);
    let pd = g.bind(&nets.dynamics, true);
    let pp = g.bind(&nets.policy, true);
    let pi = g.bind(&nets.idm, true);
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut parts = StepLosses::default();
    for s in batch {
        let o = g.input(s.obs.clone());
        let o2 = g.input(s.next_obs.clone());
        let a = g.input(Tensor::vector(s.action.to_vec()));
        let z = spec.encoder.forward(g, &pe, o)?;
        let z2 = spec.encoder.forward(g, &pe, o2)?;
        let target = g.input(g.value(z2).clone());
        let pred = predict_next(spec, g, &pd, z, a)?;
        let l_dyn = g.mse_loss(pred, target)?;
        let pa = policy_action(spec, g, &pp, z)?;
        let l_bc = g.mse_loss(pa, a)?;
        let ia = inverse_action(spec, g, &pi, z, z2)?;
        let l_idm = g.mse_loss(ia, a)?;
        parts.dynamics += g.value(l_dyn).item();
        parts.bc += g.value(l_bc).item();
        parts.idm += g.value(l_idm).item();
        let wd = g.scale(l_dyn, cfg.lambda_dyn);
        let wb = g.scale(l_bc, cfg.lambda_bc);
        let wi = g.scale(l_idm, cfg.lambda_idm);
        let l = g.add(wd, wb)?;
        per_sample.push(g.add(l, wi)?);
    }
    let loss = g.mean(&per_sample)?;
    let n = batch.len() as f64;
    parts.dynamics /= n;
    parts.bc /= n;
    parts.idm /= n;
    parts.total = g.value(loss).item();
    Ok((loss, parts, pe.merged(&pd).merged(&pp).merged(&pi)))
}

/// Mean `mse(d(h(o_t), a_t), h(o_{t+1}))` over the given transitions, without augmentation.
pub fn dynamics_loss(nets: &AgentNets, ds: &Dataset, items: &[(usize, usize)]) -> Result<f64, TensorError> {
    if items.is_empty() {
        return Err(TensorError::Contract("dynamics_loss over zero transitions".into()));
    }
    let mut acc = 0.0;
    for &(e, t) in items {
        let z = super::encode(nets, &ds.observation(e, t).frames)?;
        let z2 = super::encode(nets, &ds.observation(e, t + 1).frames)?;
        acc += super::latent_dynamics_error(nets, &z, ds.episodes[e].actions[t], &z2)?;
    }
    Ok(acc / items.len() as f64)
}

pub fn pretrain(ds: &Dataset, encoder: EncoderSpec, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport), AgentError> {
    pretrain_with(ds, encoder, cfg, &mut |_, _| {})
}

/// Joint training of all four networks. `progress` sees every step's losses.
pub fn pretrain_with(
    ds: &Dataset,
    encoder: EncoderSpec,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(usize, &StepLosses),
) -> Result<(Checkpoint, TrainReport), AgentError> {
    cfg.validate()?;
    let count = ds.transitions();
    if count < MIN_TRAIN_TRANSITIONS {
        return Err(AgentError::DatasetTooSmall {
            count,
            required: MIN_TRAIN_TRANSITIONS,
        });
    }
    if ds.frame_shape[0] * ds.framestack != encoder.in_channels || ds.frame_shape[1] != encoder.image_size {
        return Err(AgentError::Config(format!(
            "dataset frames {:?} x{} do not fit encoder input {}x{}x{}",
            ds.frame_shape, ds.framestack, encoder.in_channels, encoder.image_size, encoder.image_size
        )));
    }
    let mut nets = AgentNets::init(AgentSpec::new(encoder), cfg.lr, cfg.seed)?;
    let index = ds.index();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_5A3D_0000_0000);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch = sample_batch(ds, &index, cfg, &mut rng);
        let mut g = Graph::new();
        let (loss, parts, bound) = batch_loss(&nets, &mut g, &batch, cfg)?;
        if !parts.total.is_finite() {
            return Err(TensorError::NonFinite {
                what: format!("training loss at step {step}"),
            }
            .into());
        }
        g.backward(loss)?;
        for group in nets.groups_mut() {
            group.zero_grad();
            group.accumulate_from(&g, &bound)?;
            group.adam(&cfg.adam)?;
        }
        progress(step, &parts);
        report.losses.push(parts);
    }
    let checkpoint = Checkpoint::new(nets, serde_json::to_value(cfg).expect("config serializes"));
    Ok((checkpoint, report))
}
