use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{param_checksum, AdaptConfig, AdaptError, FrozenDynamics, Method, RingBuffer, Sae, SaeBound};
use crate::agent::{
    act_latent, dynamics_error, inverse_action, predict_next, AgentSpec, Checkpoint, EpisodeResult, Metrics,
};
use crate::autodiff::{Bound, Graph, ParamGroup, TensorError, Var};
use crate::nn::AffineParams;
use crate::world::{episode_seed, expert_action, rollout, Transition, ViewEnv, ViewSetting, WorldConfig};

const SAE_SEED_SALT: u64 = 0x57A7_1A17_0000_0001;
const SAMPLER_SEED_SALT: u64 = 0xB0FF_E125_0000_0002;

/// One environment step of an adaptation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub episode: usize,
    /// View loss of the newest transition, measured before this step's updates.
    pub l_view: f64,
    pub buffer_size: usize,
    /// First transformer's coefficients for frame 0 of the observation acted on.
    pub phi: [f64; 6],
    /// Optimizer iterations run after this step.
    pub updates_done: usize,
}

#[derive(Serialize)]
struct CsvRow {
    step: usize,
    episode: usize,
    #[serde(rename = "L_view")]
    l_view: f64,
    buffer_size: usize,
    phi0: f64,
    phi1: f64,
    phi2: f64,
    phi3: f64,
    phi4: f64,
    phi5: f64,
    updates_done: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptLog {
    pub rows: Vec<LogRow>,
}

impl AdaptLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            let [phi0, phi1, phi2, phi3, phi4, phi5] = r.phi;
            w.serialize(CsvRow {
                step: r.step,
                episode: r.episode,
                l_view: r.l_view,
                buffer_size: r.buffer_size,
                phi0,
                phi1,
                phi2,
                phi3,
                phi4,
                phi5,
                updates_done: r.updates_done,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn total_updates(&self) -> usize {
        self.rows.iter().map(|r| r.updates_done).sum()
    }

    pub fn episode_rows(&self, episode: usize) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.episode == episode)
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub metrics: Metrics,
    pub episodes: Vec<EpisodeResult>,
    pub log: AdaptLog,
    /// The encoder as left by the run.
    pub sae: Sae,
    pub dynamics_checksum_before: String,
    pub dynamics_checksum_after: String,
}

/// Mean over the batch of `mse(d(SAE(o_t), a_t), SAE(o_{t+1}))`. Gradient
/// reaches the SAE through both encodings unless `stop_gradient` detaches
/// the target.
pub fn adapt_loss(
    g: &mut Graph,
    sae: &Sae,
    bound: &SaeBound,
    spec: &AgentSpec,
    dynamics: &Bound,
    batch: &[&Transition],
    stop_gradient: bool,
) -> Result<Var, TensorError> {
    let mut losses = Vec::with_capacity(batch.len());
    for t in batch {
        let o = g.input(t.obs.frames.clone());
        let o2 = g.input(t.next_obs.frames.clone());
        let a = g.input(crate::autodiff::Tensor::vector(t.action.to_vec()));
        let z = sae.forward(g, bound, o)?.latent;
        let mut z2 = sae.forward(g, bound, o2)?.latent;
        if stop_gradient {
            z2 = g.input(g.value(z2).clone());
        }
        let pred = predict_next(spec, g, dynamics, z, a)?;
        losses.push(g.mse_loss(pred, z2)?);
    }
    g.mean(&losses)
}

/// Mean over the batch of `mse(idm(SAE(o_t), SAE(o_{t+1})), a_t)`.
fn idm_loss(
    g: &mut Graph,
    sae: &Sae,
    bound: &SaeBound,
    spec: &AgentSpec,
    idm: &Bound,
    batch: &[&Transition],
) -> Result<Var, TensorError> {
    let mut losses = Vec::with_capacity(batch.len());
    for t in batch {
        let o = g.input(t.obs.frames.clone());
        let o2 = g.input(t.next_obs.frames.clone());
        let a = g.input(crate::autodiff::Tensor::vector(t.action.to_vec()));
        let z = sae.forward(g, bound, o)?.latent;
        let z2 = sae.forward(g, bound, o2)?.latent;
        let pa = inverse_action(spec, g, idm, z, z2)?;
        losses.push(g.mse_loss(pa, a)?);
    }
    g.mean(&losses)
}

fn step_group(group: &mut ParamGroup, g: &Graph, bound: &Bound, cfg: &AdaptConfig) -> Result<(), TensorError> {
    group.zero_grad();
    group.accumulate_from(g, bound)?;
    group.adam(&cfg.adam)
}

struct Learner<'a> {
    spec: &'a AgentSpec,
    cfg: &'a AdaptConfig,
    sae: Sae,
    frozen: FrozenDynamics,
    /// Trainable copy, used only by `finetune_dm`.
    tuned_dynamics: Option<ParamGroup>,
    idm: Option<ParamGroup>,
}

impl Learner<'_> {
    fn dynamics(&self) -> &ParamGroup {
        self.tuned_dynamics.as_ref().unwrap_or(self.frozen.params())
    }

    fn update(&mut self, batch: &[&Transition]) -> Result<(), TensorError> {
        let mut g = Graph::new();
        let sb = self.sae.bind(&mut g, true);
        let pd = g.bind(self.dynamics(), self.tuned_dynamics.is_some());
        let pi = self.idm.as_ref().map(|p| g.bind(p, true));
        let loss = match &pi {
            Some(pi) => idm_loss(&mut g, &self.sae, &sb, self.spec, pi, batch)?,
            None => adapt_loss(&mut g, &self.sae, &sb, self.spec, &pd, batch, self.cfg.stop_gradient_target)?,
        };
        g.backward(loss)?;
        step_group(&mut self.sae.stn, &g, &sb.stn, self.cfg)?;
        step_group(&mut self.sae.encoder, &g, &sb.encoder, self.cfg)?;
        if let Some(d) = &mut self.tuned_dynamics {
            step_group(d, &g, &pd, self.cfg)?;
        }
        if let (Some(p), Some(b)) = (&mut self.idm, &pi) {
            step_group(p, &g, b, self.cfg)?;
        }
        Ok(())
    }
}

/// Rolls out `cfg.episodes` episodes under `setting`, adapting online.
///
/// Each step acts with the current SAE and policy, stores the transition,
/// and once the buffer holds a batch runs `updates_per_step` optimizer
/// iterations on uniformly drawn batches. The buffer and optimizer persist
/// across episodes. With `Method::None` this is exactly [`crate::agent::evaluate`].
pub fn run_adaptation(
    ckpt: &Checkpoint,
    setting: ViewSetting,
    cfg: &AdaptConfig,
    seed: u64,
    world: &WorldConfig,
) -> Result<AdaptOutcome, AdaptError> {
    cfg.validate()?;
    setting.validate()?;
    let nets = &ckpt.nets;
    let method = cfg.method;
    let sae = Sae::build(ckpt, cfg.effective_stn_count(), cfg.lr_stn, cfg.lr_enc, seed ^ SAE_SEED_SALT)?;
    let frozen = FrozenDynamics::new(nets.dynamics.clone());
    let dynamics_checksum_before = frozen.checksum().to_string();
    let head = |p: &ParamGroup| -> Result<ParamGroup, TensorError> {
        let mut p = p.clone();
        p.set_learning_rate(cfg.lr_head)?;
        p.reset_optimizer();
        Ok(p)
    };
    let mut learner = Learner {
        spec: &nets.spec,
        cfg,
        sae,
        tuned_dynamics: (method == Method::FinetuneDm).then(|| head(frozen.params())).transpose()?,
        idm: (method == Method::IdmStn).then(|| head(&nets.idm)).transpose()?,
        frozen,
    };
    let mut buffer = RingBuffer::new(cfg.buffer_size);
    let mut sampler = ChaCha8Rng::seed_from_u64(seed ^ SAMPLER_SEED_SALT);
    let mut log = AdaptLog::default();
    let mut results = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let mut env = ViewEnv::new(world, setting, episode_seed(seed, e as u64));
        let mut obs = env.observation();
        let (mut z, mut phis) = learner.sae.encode(&obs.frames)?;
        let (mut steps, mut success, mut last_loss) = (0, false, 0.0);
        while !env.is_done() {
            let a = act_latent(nets, &z)?;
            let out = env.step(a);
            let (z_next, phis_next) = learner.sae.encode(&out.next_obs.frames)?;
            let l_view = dynamics_error(&nets.spec, learner.dynamics(), &z, a, &z_next)?;
            buffer.push(Transition {
                obs,
                action: a,
                next_obs: out.next_obs.clone(),
                success: out.success,
            });
            let mut updates_done = 0;
            if method.updates() && buffer.len() >= cfg.batch {
                for _ in 0..cfg.updates_per_step {
                    let batch = buffer.sample(cfg.batch, &mut sampler);
                    learner.update(&batch)?;
                    updates_done += 1;
                }
            }
            log.rows.push(LogRow {
                step: log.rows.len(),
                episode: e,
                l_view,
                buffer_size: buffer.len(),
                phi: phis.first().map_or(AffineParams::IDENTITY.0, |f| f[0].0),
                updates_done,
            });
            (z, phis) = if updates_done > 0 {
                learner.sae.encode(&out.next_obs.frames)?
            } else {
                (z_next, phis_next)
            };
            obs = out.next_obs;
            steps += 1;
            success = out.success;
            last_loss = l_view;
        }
        results.push(EpisodeResult {
            episode: e,
            success,
            steps,
            final_dyn_loss: last_loss,
        });
    }
    let dynamics_checksum_after = param_checksum(learner.dynamics());
    Ok(AdaptOutcome {
        metrics: Metrics::from_episodes(&results),
        episodes: results,
        log,
        sae: learner.sae,
        dynamics_checksum_before,
        dynamics_checksum_after,
    })
}

/// Mean coefficients of every transformer (averaged over frames too) on
/// `n_obs` observations from expert rollouts under `setting`.
pub fn affine_probe(
    sae: &Sae,
    setting: ViewSetting,
    n_obs: usize,
    seed: u64,
    world: &WorldConfig,
) -> Result<Vec<AffineParams>, AdaptError> {
    setting.validate()?;
    let mut sums = vec![[0.0; 6]; sae.stn_count()];
    let mut counts = vec![0usize; sae.stn_count()];
    let mut seen = 0;
    let mut batch = 0;
    while seen < n_obs {
        let traces = rollout(|_, s| expert_action(s), setting, 1, episode_seed(seed, batch), world);
        batch += 1;
        for tr in &traces {
            for t in 0..=tr.steps() {
                if seen == n_obs {
                    break;
                }
                let (_, phis) = sae.encode(&tr.observation(t).frames)?;
                for ((sum, count), frames) in sums.iter_mut().zip(&mut counts).zip(&phis) {
                    for p in frames {
                        for k in 0..6 {
                            sum[k] += p.0[k];
                        }
                    }
                    *count += frames.len();
                }
                seen += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| AffineParams(s.map(|v| v / n.max(1) as f64)))
        .collect())
}
