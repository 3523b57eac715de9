//! End-to-end acceptance run. Prints one line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Pretrained checkpoints are cached under the cargo target tmpdir, keyed by
//! the training and data configuration; every measurement is recomputed.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use movie_kit::adapt::{affine_probe, run_adaptation, AdaptConfig, AdaptOutcome, Method, Sae};
use movie_kit::agent::{encode, evaluate, pretrain, Checkpoint, CHECKPOINT_FORMAT_VERSION};
use movie_kit::bench::{gradcheck_suite, RunConfig, GRADCHECK_TOLERANCE};
use movie_kit::nn::AffineParams;
use movie_kit::world::{rollout, CameraPose, Dataset, NovelLevel, ViewEnv, ViewSetting};

const SEEDS: [u64; 3] = [0, 1, 2];
const DATA_EPISODES: usize = 2000;
const PRETRAIN_BUDGET: Duration = Duration::from_secs(2 * 3600);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// `true` once `k` of `n` outcomes are known to pass, `false` once that is
/// out of reach; `None` while undecided.
fn decided(results: &[bool], need: usize, total: usize) -> Option<bool> {
    let passed = results.iter().filter(|&&p| p).count();
    let failed = results.len() - passed;
    if passed >= need {
        Some(true)
    } else if total - failed < need {
        Some(false)
    } else {
        None
    }
}

fn medium() -> ViewSetting {
    ViewSetting::NovelView(NovelLevel::Medium)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Ctx {
    cfg: RunConfig,
    cache_dir: PathBuf,
    ckpts: HashMap<u64, (Checkpoint, PathBuf, Duration)>,
    runs: HashMap<(Method, String, u64), AdaptOutcome>,
    plain: HashMap<(String, u64, usize), f64>,
}

impl Ctx {
    fn new() -> Self {
        let cache_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        fs::create_dir_all(&cache_dir).expect("cache dir");
        Self {
            cfg: RunConfig::default(),
            cache_dir,
            ckpts: HashMap::new(),
            runs: HashMap::new(),
            plain: HashMap::new(),
        }
    }

    fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg.train).unwrap());
        h.update(serde_json::to_vec(&self.cfg.world).unwrap());
        h.update(DATA_EPISODES.to_le_bytes());
        h.update(CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        h.update(env!("CARGO_PKG_VERSION"));
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Checkpoint pretrained with seed `seed` on data generated with the same seed.
    fn ckpt(&mut self, seed: u64) -> &(Checkpoint, PathBuf, Duration) {
        if !self.ckpts.contains_key(&seed) {
            let path = self.cache_dir.join(format!("ckpt-{}-seed{seed}.json", self.cache_key()));
            let secs_path = path.with_extension("secs");
            let cached = fs::read_to_string(&secs_path)
                .ok()
                .and_then(|s| s.trim().parse::<f64>().ok())
                .and_then(|s| Checkpoint::load(&path).ok().map(|c| (c, s)));
            let (ckpt, secs) = match cached {
                Some(c) => c,
                None => {
                    let start = Instant::now();
                    let ds = Dataset::generate(&self.cfg.world, DATA_EPISODES, seed);
                    let mut train = self.cfg.train.clone();
                    train.seed = seed;
                    let arch = self.cfg.architecture().expect("architecture");
                    let (ckpt, _) = pretrain(&ds, arch.encoder, &train).expect("pretraining");
                    let secs = start.elapsed().as_secs_f64();
                    ckpt.save(&path).expect("save checkpoint");
                    fs::write(&secs_path, format!("{secs}\n")).expect("write timing");
                    (ckpt, secs)
                }
            };
            self.ckpts.insert(seed, (ckpt, path, Duration::from_secs_f64(secs)));
        }
        &self.ckpts[&seed]
    }

    fn success(&mut self, setting: ViewSetting, seed: u64, episodes: usize) -> f64 {
        let key = (setting.to_string(), seed, episodes);
        if let Some(&v) = self.plain.get(&key) {
            return v;
        }
        let world = self.cfg.world.clone();
        let (m, _) = evaluate(&self.ckpt(seed).0, setting, episodes, seed, &world).expect("evaluate");
        self.plain.insert(key, m.success_rate);
        m.success_rate
    }

    fn adapt(&mut self, method: Method, setting: ViewSetting, seed: u64) -> &AdaptOutcome {
        let key = (method, setting.to_string(), seed);
        if !self.runs.contains_key(&key) {
            let acfg = AdaptConfig {
                method,
                ..self.cfg.adapt.clone()
            };
            let world = self.cfg.world.clone();
            let out = run_adaptation(&self.ckpt(seed).0, setting, &acfg, seed, &world).expect("adaptation run");
            self.runs.insert(key.clone(), out);
        }
        &self.runs[&key]
    }
}

fn cli(args: &[&str], threads: Option<&str>, dir: &Path) -> std::process::Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_movie-kit"));
    c.current_dir(dir).args(args);
    match threads {
        Some(t) => c.env("MOVIE_KIT_THREADS", t),
        None => c.env_remove("MOVIE_KIT_THREADS"),
    };
    c.output().expect("run cli")
}

fn gradient_oracle(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let reports = gradcheck_suite(5, None).expect("gradcheck suite");
    let took = start.elapsed();
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let all_ok = reports.iter().all(|r| r.max_relative_error < GRADCHECK_TOLERANCE);
    let ops: std::collections::BTreeSet<_> = reports.iter().map(|r| r.label.as_str()).collect();
    Verdict::new(
        all_ok && took < GRADCHECK_BUDGET && reports.len() >= 5 * ops.len(),
        format!("{} checks over {} ops, worst {worst:.2e}, {:.1?}", reports.len(), ops.len(), took),
    )
}

fn identity_exactness(ctx: &mut Ctx) -> Verdict {
    let world = ctx.cfg.world.clone();
    let ckpt = ctx.ckpt(0).0.clone();
    let stns = movie_kit::nn::Architecture::for_encoder(&ckpt.nets.spec.encoder).expect("profile").stns.len();
    let sae = Sae::build(&ckpt, stns, 1e-5, 1e-7, 11).expect("sae");
    let settings = [ViewSetting::Train, medium(), ViewSetting::moving(), ViewSetting::shaking(), ViewSetting::novel_fov()];
    let mut checked = 0;
    let mut mismatched = 0;
    'outer: for (i, &s) in settings.iter().cycle().enumerate() {
        for tr in rollout(|_, st| movie_kit::world::expert_action(st), s, 1, 900 + i as u64, &world) {
            for t in 0..=tr.steps() {
                let obs = tr.observation(t).frames;
                let h = encode(&ckpt.nets, &obs).expect("encode");
                let (z, _) = sae.encode(&obs).expect("sae encode");
                if h.iter().zip(&z).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    mismatched += 1;
                }
                checked += 1;
                if checked == 100 {
                    break 'outer;
                }
            }
        }
    }
    Verdict::new(mismatched == 0, format!("{checked} observations through {stns} transformers, {mismatched} differ"))
}

fn frozen_dynamics(ctx: &mut Ctx) -> Verdict {
    let movie = ctx.adapt(Method::Movie, medium(), 0);
    let (b, a, eps) = (
        movie.dynamics_checksum_before.clone(),
        movie.dynamics_checksum_after.clone(),
        movie.episodes.len(),
    );
    let world = ctx.cfg.world.clone();
    let acfg = AdaptConfig {
        method: Method::FinetuneDm,
        episodes: 2,
        ..ctx.cfg.adapt.clone()
    };
    let ft = run_adaptation(&ctx.ckpt(0).0, medium(), &acfg, 0, &world).expect("finetune_dm run");
    let stored = Checkpoint::load(&ctx.ckpt(0).1).expect("reload");
    let untouched = stored
        .nets
        .dynamics
        .iter()
        .zip(ctx.ckpt(0).0.nets.dynamics.iter())
        .all(|((_, x), (_, y))| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    Verdict::new(
        b == a && eps == 20 && untouched && ft.dynamics_checksum_before != ft.dynamics_checksum_after && ft.dynamics_checksum_before == b,
        format!(
            "movie {}..{} over {eps} episodes; finetune_dm {}..{}",
            &b[..12],
            &a[..12],
            &ft.dynamics_checksum_before[..12],
            &ft.dynamics_checksum_after[..12]
        ),
    )
}

fn protocol_fidelity(ctx: &mut Ctx) -> Verdict {
    let adapt = ctx.cfg.adapt.clone();
    let log = ctx.adapt(Method::Movie, medium(), 0).log.clone();
    let warm: Vec<_> = log.rows.iter().filter(|r| r.buffer_size >= 32).collect();
    let cold_ok = log.rows.iter().filter(|r| r.buffer_size < 32).all(|r| r.updates_done == 0);
    let per_step_ok = warm.iter().all(|r| r.updates_done == 32);
    let max_buffer = log.rows.iter().map(|r| r.buffer_size).max().unwrap_or(0);

    let dir = tempfile::tempdir().expect("tempdir");
    let ck = ctx.ckpt(0).1.clone();
    let out = cli(
        &["eval", "--ckpt", ck.to_str().unwrap(), "--method", "none", "--setting", "train", "--seeds", "0", "--episodes", "1", "--out", "r.csv", "--log-dir", "logs"],
        None,
        dir.path(),
    );
    let echo: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("logs/config.json")).unwrap_or_default()).unwrap_or_default();
    let a = &echo["adapt"];
    let echo_ok = out.status.success()
        && a["updates_per_step"] == 32
        && a["buffer_size"] == 256
        && a["batch"] == 32
        && a["lr_stn"].as_f64() == Some(1e-5)
        && a["lr_enc"].as_f64() == Some(1e-7)
        && adapt.updates_per_step == 32
        && adapt.buffer_size == 256
        && adapt.batch == 32;
    Verdict::new(
        cold_ok && per_step_ok && !warm.is_empty() && max_buffer == 256 && echo_ok,
        format!(
            "{} post-warmup steps all with 32 updates: {per_step_ok}; buffer max {max_buffer}; echo {}",
            warm.len(),
            serde_json::to_string(a).unwrap_or_default()
        ),
    )
}

fn validity_gate(ctx: &mut Ctx) -> Verdict {
    let mut parts = Vec::new();
    let mut results = Vec::new();
    for s in SEEDS {
        let took = ctx.ckpt(s).2;
        let train = ctx.success(ViewSetting::Train, s, 60);
        let novel = ctx.success(medium(), s, 60);
        let ok = train >= 0.90 && train - novel >= 0.20 && took <= PRETRAIN_BUDGET;
        parts.push(format!("seed {s}: train {train:.3} medium {novel:.3} pretrain {:.0}s", took.as_secs_f64()));
        results.push(ok);
        if decided(&results, 2, SEEDS.len()).is_some() {
            break;
        }
    }
    Verdict::new(decided(&results, 2, SEEDS.len()) == Some(true), parts.join("; "))
}

fn adaptation_efficacy(ctx: &mut Ctx) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for setting in [medium(), ViewSetting::moving(), ViewSetting::novel_fov(), ViewSetting::shaking()] {
        let shaking = matches!(setting, ViewSetting::ShakingView { .. });
        let mut results = Vec::new();
        let mut cells = Vec::new();
        for s in SEEDS {
            let none = ctx.success(setting, s, 20);
            let movie = ctx.adapt(Method::Movie, setting, s).metrics.success_rate;
            let ok = if shaking {
                movie >= none - 0.05
            } else if movie < none + 0.15 {
                false
            } else {
                let dm = ctx.adapt(Method::Dm, setting, s).metrics.success_rate;
                cells.push(format!("dm {dm:.2}"));
                movie >= dm
            };
            cells.push(format!("s{s} none {none:.2} movie {movie:.2}"));
            results.push(ok);
            if decided(&results, 2, SEEDS.len()).is_some() {
                break;
            }
        }
        let ok = decided(&results, 2, SEEDS.len()) == Some(true);
        pass &= ok;
        parts.push(format!("{setting} {} [{}]", if ok { "ok" } else { "no" }, cells.join(", ")));
    }
    Verdict::new(pass, parts.join("; "))
}

fn loss_descent(ctx: &mut Ctx) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for setting in [medium(), ViewSetting::novel_fov()] {
        let mut results = Vec::new();
        for s in SEEDS {
            let log = &ctx.adapt(Method::Movie, setting, s).log;
            let mut early: Vec<f64> = log.rows.iter().filter(|r| r.updates_done > 0).take(50).map(|r| r.l_view).collect();
            let last = log.rows.last().map_or(0, |r| r.episode);
            let mut late: Vec<f64> = log.episode_rows(last).map(|r| r.l_view).collect();
            let (e, l) = (median(&mut early), median(&mut late));
            parts.push(format!("{setting} s{s}: {l:.3e} / {e:.3e}"));
            results.push(l <= 0.5 * e);
            if decided(&results, 2, SEEDS.len()).is_some() {
                break;
            }
        }
        pass &= decided(&results, 2, SEEDS.len()) == Some(true);
    }
    Verdict::new(pass, parts.join("; "))
}

fn mechanism_probe(ctx: &mut Ctx) -> Verdict {
    let world = ctx.cfg.world.clone();
    let fov = ViewSetting::novel_fov();
    let pose: CameraPose = *ViewEnv::new(&world, fov, 0).pose();
    let truth = world.view_affine(&CameraPose::TRAIN, &pose);
    let sae = ctx.adapt(Method::Movie, fov, 0).sae.clone();
    let phi = affine_probe(&sae, fov, 100, 0, &world).expect("probe")[0];
    let residual = phi.compose(&truth.inverse().expect("invertible"));
    let fov_err = residual.max_abs_diff(&AffineParams::IDENTITY);
    let control = ctx.adapt(Method::Movie, ViewSetting::Train, 0).sae.clone();
    let cphi = affine_probe(&control, ViewSetting::Train, 100, 0, &world).expect("probe")[0];
    let control_err = cphi.max_abs_diff(&AffineParams::IDENTITY);
    Verdict::new(
        fov_err <= 0.15 && control_err <= 0.05,
        format!("fov phi {:.3?} vs truth {:.3?}: residual {fov_err:.3}; train control {control_err:.3}", phi.0, truth.0),
    )
}

fn ablation_parity(ctx: &mut Ctx) -> Verdict {
    const EPISODES: usize = 5;
    let dir = tempfile::tempdir().expect("tempdir");
    let ck = ctx.ckpt(0).1.clone();
    let out = cli(
        &["ablate", "--ckpt", ck.to_str().unwrap(), "--setting", "novel-medium", "--stn-counts", "0,1,2,3,4", "--seeds", "0", "--episodes", "2", "--out", "ablation.csv"],
        None,
        dir.path(),
    );
    let text = fs::read_to_string(dir.path().join("ablation.csv")).unwrap_or_default();
    let mut lines = text.lines();
    let header_ok = lines.next()
        == Some("stn_count,method,setting,seed,episodes,success_rate,mean_steps,mean_final_dyn_loss,updates");
    let counts: Vec<String> = lines.map(|l| l.split(',').next().unwrap_or("").to_string()).collect();
    let rows_ok = counts == ["0", "1", "2", "3", "4"];

    let world = ctx.cfg.world.clone();
    let run = |method| {
        let acfg = AdaptConfig {
            method,
            stn_count: 0,
            episodes: EPISODES,
            ..ctx.cfg.adapt.clone()
        };
        run_adaptation(&ctx.ckpts[&0].0, medium(), &acfg, 0, &world).expect("run")
    };
    let (m, d) = (run(Method::Movie), run(Method::Dm));
    let bits = |o: &AdaptOutcome| {
        let mut v = vec![o.metrics.success_rate.to_bits(), o.metrics.mean_steps.to_bits(), o.metrics.mean_final_dyn_loss.to_bits()];
        v.extend(o.log.rows.iter().map(|r| r.l_view.to_bits()));
        v
    };
    let parity = bits(&m) == bits(&d) && m.episodes == d.episodes && m.log.total_updates() > 0;
    Verdict::new(
        out.status.success() && header_ok && rows_ok && parity,
        format!("cli exit {:?}, rows {counts:?}, stn_count 0 movie == dm over {EPISODES} episodes: {parity}", out.status.code()),
    )
}

fn determinism(ctx: &mut Ctx) -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let ck = ctx.ckpt(0).1.clone();
    let ck = ck.to_str().unwrap();
    fs::write(dir.path().join("short.json"), r#"{"world": {"horizon": 12}, "adapt": {"episodes": 2}}"#).unwrap();
    let invocations: Vec<(Vec<&str>, &str)> = vec![
        (vec!["gen-data", "--seed", "3", "--episodes", "4", "--out", "OUT"], "OUT/manifest.json"),
        (
            vec!["--config", "short.json", "eval", "--ckpt", ck, "--method", "none,movie,dm", "--setting", "shaking,novel-fov", "--seeds", "0,1", "--out", "OUT/r.csv"],
            "OUT/r.csv",
        ),
        (
            vec!["--config", "short.json", "ablate", "--ckpt", ck, "--setting", "moving", "--stn-counts", "0,2", "--seeds", "0,1", "--out", "OUT/a.csv"],
            "OUT/a.csv",
        ),
    ];
    let mut same = true;
    let mut notes = Vec::new();
    for (k, (args, file)) in invocations.iter().enumerate() {
        let mut outputs = Vec::new();
        for (run, threads) in [None, None, Some("3")].into_iter().enumerate() {
            let tag = format!("o{k}_{run}");
            let a: Vec<String> = args.iter().map(|s| s.replace("OUT", &tag)).collect();
            let a: Vec<&str> = a.iter().map(String::as_str).collect();
            let o = cli(&a, threads, dir.path());
            let bytes = fs::read(dir.path().join(file.replace("OUT", &tag))).unwrap_or_default();
            same &= o.status.success() && !bytes.is_empty();
            outputs.push(bytes);
        }
        let eq = outputs.windows(2).all(|w| w[0] == w[1]);
        same &= eq;
        notes.push(format!("{} {}", args[..3].iter().find(|a| !a.starts_with('-') && !a.ends_with(".json")).unwrap(), if eq { "identical" } else { "DIFFER" }));
    }
    Verdict::new(same, notes.join(", "))
}

fn main() -> ExitCode {
    type Check = fn(&mut Ctx) -> Verdict;
    let criteria: [(&str, Check); 10] = [
        ("gradient oracle", gradient_oracle),
        ("identity-init exactness", identity_exactness),
        ("frozen dynamics integrity", frozen_dynamics),
        ("protocol fidelity", protocol_fidelity),
        ("benchmark validity gate", validity_gate),
        ("adaptation efficacy", adaptation_efficacy),
        ("loss descent", loss_descent),
        ("mechanism probe", mechanism_probe),
        ("ablation harness parity", ablation_parity),
        ("determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut ctx = Ctx::new();
    let mut failed = 0;
    let stdout = std::io::stdout();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let v = check(&mut ctx);
        failed += usize::from(!v.pass);
        let mut out = stdout.lock();
        let _ = writeln!(
            out,
            "criterion {n:>2} {:<26} {}  ({:.0?})  {}",
            name,
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed(),
            v.detail
        );
        let _ = out.flush();
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
