use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::{BenchError, ResultRow, RunConfig};
use crate::adapt::{run_adaptation, AdaptLog, Method};
use crate::agent::{evaluate, Checkpoint, EpisodeResult, Metrics};
use crate::world::ViewSetting;

/// Environment variable capping the number of cells run at once.
pub const THREADS_ENV: &str = "MOVIE_KIT_THREADS";

/// One (method, setting, seed) evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub setting: ViewSetting,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CellOutput {
    pub cell: Cell,
    pub metrics: Metrics,
    pub episodes: Vec<EpisodeResult>,
    /// Per-step adaptation log; `None` for `Method::None`.
    pub log: Option<AdaptLog>,
}

impl CellOutput {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.episodes
            .iter()
            .map(|e| ResultRow {
                method: self.cell.method,
                setting: self.cell.setting.to_string(),
                seed: self.cell.seed,
                episode: e.episode,
                success: e.success as u8,
                steps: e.steps,
                final_dyn_loss: e.final_dyn_loss,
            })
            .collect()
    }
}

/// Cells in canonical order: settings, then methods, then seeds.
pub fn cells(methods: &[Method], settings: &[ViewSetting], seeds: &[u64]) -> Vec<Cell> {
    let mut out = Vec::new();
    for &setting in settings {
        for &method in methods {
            for &seed in seeds {
                out.push(Cell { method, setting, seed });
            }
        }
    }
    out
}

/// Plain evaluation for `none`, online adaptation otherwise. Episodes come
/// from `cfg.adapt.episodes` either way.
pub fn run_cell(ckpt: &Checkpoint, cell: Cell, cfg: &RunConfig) -> Result<CellOutput, BenchError> {
    if cell.method == Method::None {
        let (metrics, episodes) = evaluate(ckpt, cell.setting, cfg.adapt.episodes, cell.seed, &cfg.world)?;
        return Ok(CellOutput {
            cell,
            metrics,
            episodes,
            log: None,
        });
    }
    let acfg = crate::adapt::AdaptConfig {
        method: cell.method,
        ..cfg.adapt.clone()
    };
    let out = run_adaptation(ckpt, cell.setting, &acfg, cell.seed, &cfg.world)?;
    Ok(CellOutput {
        cell,
        metrics: out.metrics,
        episodes: out.episodes,
        log: Some(out.log),
    })
}

/// Worker count from [`THREADS_ENV`], defaulting to 1.
pub fn threads_from_env() -> Result<usize, BenchError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| BenchError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
    }
}

/// Runs every cell on up to `threads` workers. Outputs come back in the
/// order of `cells` regardless of which worker finished first; the first
/// error in that order is returned.
pub fn run_cells(ckpt: &Checkpoint, cells: &[Cell], cfg: &RunConfig, threads: usize) -> Result<Vec<CellOutput>, BenchError> {
    let slots: Vec<Mutex<Option<Result<CellOutput, BenchError>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&cell) = cells.get(i) else { break };
        let r = run_cell(ckpt, cell, cfg);
        *slots[i].lock().expect("result slot") = Some(r);
    };
    let workers = threads.clamp(1, cells.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect()
}

/// One row of the transformer-count ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub stn_count: usize,
    pub method: Method,
    pub setting: String,
    pub seed: u64,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_final_dyn_loss: f64,
    pub updates: usize,
}

impl AblationRow {
    pub fn new(stn_count: usize, out: &CellOutput) -> Self {
        Self {
            stn_count,
            method: out.cell.method,
            setting: out.cell.setting.to_string(),
            seed: out.cell.seed,
            episodes: out.episodes.len(),
            success_rate: out.metrics.success_rate,
            mean_steps: out.metrics.mean_steps,
            mean_final_dyn_loss: out.metrics.mean_final_dyn_loss,
            updates: out.log.as_ref().map_or(0, |l| l.total_updates()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentNets, AgentSpec};
    use crate::nn::EncoderSpec;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.world.horizon = 4;
        cfg.adapt.episodes = 2;
        cfg.adapt.buffer_size = 4;
        cfg.adapt.batch = 2;
        cfg.adapt.updates_per_step = 1;
        cfg
    }

    #[test]
    fn canonical_order_ignores_thread_count() {
        let ck = Checkpoint::new(AgentNets::init(AgentSpec::new(EncoderSpec::desk()), 1e-3, 0).unwrap(), serde_json::json!({}));
        let cfg = tiny_config();
        let cs = cells(&[Method::None, Method::Movie], &[ViewSetting::shaking()], &[0, 1]);
        assert_eq!(cs.len(), 4);
        let one = run_cells(&ck, &cs, &cfg, 1).unwrap();
        let three = run_cells(&ck, &cs, &cfg, 3).unwrap();
        let rows = |o: &[CellOutput]| o.iter().flat_map(|c| c.rows()).collect::<Vec<_>>();
        assert_eq!(rows(&one), rows(&three));
        assert_eq!(one.iter().map(|o| o.cell).collect::<Vec<_>>(), cs);
        assert!(one[0].log.is_none());
        assert!(one[2].log.as_ref().unwrap().total_updates() > 0);
    }
}
