use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use movie_kit::adapt::{AdaptError, Method};
use movie_kit::agent::{pretrain_with, AgentError, Checkpoint};
use movie_kit::autodiff::Fault;
use movie_kit::bench::{
    cells, gradcheck_suite, read_results, run_cells, threads_from_env, write_results, AblationRow, BenchError, RunConfig,
    SummaryTable, GRADCHECK_TOLERANCE,
};
use movie_kit::world::{Dataset, ViewSetting, WorldError};

#[derive(Parser)]
#[command(name = "movie-kit", version, about = "Test-time view adaptation testbed")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write expert rollouts on the training view as a dataset shard.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train encoder, dynamics, policy and inverse dynamics on a shard.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate or adapt a checkpoint and write one row per episode.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated methods.
        #[arg(long, value_delimiter = ',', required = true)]
        method: Vec<Method>,
        /// Comma-separated settings.
        #[arg(long, value_delimiter = ',', required = true)]
        setting: Vec<ViewSetting>,
        /// Overrides `eval.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Overrides `adapt.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        /// Overrides `adapt.stn_count`.
        #[arg(long)]
        stn_count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-run adaptation logs and the config echo.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Adapt with each transformer count and write one row per run.
    Ablate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        setting: Vec<ViewSetting>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        stn_counts: Vec<usize>,
        #[arg(long, default_value = "movie")]
        method: Method,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients of every primitive against finite differences.
    Gradcheck {
        /// Seeded instances per primitive.
        #[arg(long, default_value_t = 5)]
        instances: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Aggregate result CSVs into a Markdown summary and a CSV twin.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Conv2d,
}

/// A failed gradient check, reported with its own exit code.
#[derive(Debug)]
struct GradcheckFailed(usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient checks at or above tolerance {GRADCHECK_TOLERANCE:e}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    let size = ckpt.nets.spec.encoder.image_size;
    if size != cfg.world.image_size {
        return Err(BenchError::Config(format!(
            "checkpoint {} expects {size}px frames but world.image_size is {}",
            path.display(),
            cfg.world.image_size
        ))
        .into());
    }
    Ok(ckpt)
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| BenchError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::File::create(path).map_err(|source| {
        BenchError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create(path)?.write_all(bytes).map_err(|source| {
        BenchError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { seed, episodes, out } => {
            let ds = Dataset::generate(&cfg.world, episodes, seed);
            let m = ds.write(&out)?;
            println!("{} transitions in {} episodes -> {}", m.transitions, m.episodes, out.display());
        }
        Command::Pretrain { data, out, steps, seed } => {
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            cfg.train.seed = seed.unwrap_or(cfg.train.seed);
            let ds = Dataset::read(&data)?;
            let arch = cfg.architecture()?;
            let start = Instant::now();
            let every = (cfg.train.steps / 20).max(1);
            let (ckpt, report) = pretrain_with(&ds, arch.encoder, &cfg.train, &mut |step, l| {
                if step % every == 0 {
                    eprintln!(
                        "step {step:>6}  total {:.5}  dyn {:.5}  bc {:.5}  idm {:.5}  {:.0?}",
                        l.total,
                        l.dynamics,
                        l.bc,
                        l.idm,
                        start.elapsed()
                    );
                }
            })?;
            ckpt.save(&out)?;
            match report.losses.last() {
                Some(l) => println!(
                    "final losses after {} steps: total {} dynamics {} bc {} idm {}",
                    report.losses.len(),
                    l.total,
                    l.dynamics,
                    l.bc,
                    l.idm
                ),
                None => println!("0 steps: wrote initialization checkpoint"),
            }
            println!("checkpoint -> {}", out.display());
        }
        Command::Eval {
            ckpt,
            method,
            setting,
            seeds,
            episodes,
            stn_count,
            out,
            log_dir,
        } => {
            cfg.eval.seeds = seeds.unwrap_or(cfg.eval.seeds);
            cfg.adapt.episodes = episodes.unwrap_or(cfg.adapt.episodes);
            cfg.adapt.stn_count = stn_count.unwrap_or(cfg.adapt.stn_count);
            cfg.validate()?;
            let echo = cfg.to_json();
            eprintln!("config {}", serde_json::to_string(&cfg)?);
            let ckpt = load_checkpoint(&ckpt, &cfg)?;
            let cs = cells(&method, &setting, &cfg.eval.seeds);
            let outputs = run_cells(&ckpt, &cs, &cfg, threads_from_env()?)?;
            let rows: Vec<_> = outputs.iter().flat_map(|o| o.rows()).collect();
            write_results(&rows, create(&out)?)?;
            if let Some(dir) = log_dir {
                write_file(&dir.join("config.json"), echo.as_bytes())?;
                for o in &outputs {
                    if let Some(log) = &o.log {
                        let name = format!("{}_{}_seed{}.csv", o.cell.method, o.cell.setting, o.cell.seed);
                        log.write_csv(create(&dir.join(name))?)?;
                    }
                }
            }
            for o in &outputs {
                println!(
                    "{:<12} {:<13} seed {:<3} success {:.3}",
                    o.cell.method, o.cell.setting, o.cell.seed, o.metrics.success_rate
                );
            }
            println!("{} rows -> {}", rows.len(), out.display());
        }
        Command::Ablate {
            ckpt,
            setting,
            stn_counts,
            method,
            seeds,
            episodes,
            out,
        } => {
            cfg.eval.seeds = seeds.unwrap_or(cfg.eval.seeds);
            cfg.adapt.episodes = episodes.unwrap_or(cfg.adapt.episodes);
            cfg.validate()?;
            eprintln!("config {}", serde_json::to_string(&cfg)?);
            let ckpt = load_checkpoint(&ckpt, &cfg)?;
            let threads = threads_from_env()?;
            let mut w = csv::Writer::from_writer(create(&out)?);
            for k in stn_counts {
                let mut c = cfg.clone();
                c.adapt.stn_count = k;
                c.validate()?;
                for o in run_cells(&ckpt, &cells(&[method], &setting, &c.eval.seeds), &c, threads)? {
                    let row = AblationRow::new(k, &o);
                    println!("stn_count {k}  {:<13} seed {:<3} success {:.3}", row.setting, row.seed, row.success_rate);
                    w.serialize(row)?;
                }
            }
            w.flush()?;
            println!("ablation -> {}", out.display());
        }
        Command::Gradcheck { instances, inject_fault } => {
            let fault = inject_fault.map(|FaultArg::Conv2d| Fault::ConvWeightGrad);
            let start = Instant::now();
            let reports = gradcheck_suite(instances.max(1), fault)?;
            let mut worst: Vec<(String, f64)> = Vec::new();
            for r in &reports {
                match worst.iter_mut().find(|(op, _)| *op == r.label) {
                    Some(w) => w.1 = w.1.max(r.max_relative_error),
                    None => worst.push((r.label.clone(), r.max_relative_error)),
                }
            }
            for (op, err) in &worst {
                let verdict = if *err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
                println!("{op:<16} max relative error {err:.3e}  {verdict}");
            }
            println!("{} checks in {:.1?}", reports.len(), start.elapsed());
            let failed = reports.iter().filter(|r| !(r.max_relative_error < GRADCHECK_TOLERANCE)).count();
            if failed > 0 {
                return Err(GradcheckFailed(failed).into());
            }
        }
        Command::Report { inputs, out } => {
            let rows = read_results(&inputs)?;
            if rows.is_empty() {
                bail!("no result rows in {} input files", inputs.len());
            }
            let csv_path = out.with_extension("csv");
            if csv_path == out {
                return Err(anyhow!("--out must not end in .csv; the CSV twin is written next to it"));
            }
            let table = SummaryTable::from_rows(&rows);
            let md = table.to_markdown();
            write_file(&out, md.as_bytes())?;
            write_file(&csv_path, table.to_csv()?.as_bytes())?;
            print!("{md}");
            println!("summary -> {} and {}", out.display(), csv_path.display());
        }
    }
    Ok(())
}

/// 2 for filesystem failures, 3 for failed gradient checks, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 3;
    }
    let io = err.chain().any(|e| {
        e.is::<std::io::Error>()
            || e.downcast_ref::<BenchError>().is_some_and(BenchError::is_io)
            || matches!(e.downcast_ref::<AgentError>(), Some(AgentError::Io { .. }))
            || matches!(e.downcast_ref::<WorldError>(), Some(WorldError::Io { .. }))
            || matches!(e.downcast_ref::<AdaptError>(), Some(AdaptError::Agent(AgentError::Io { .. })))
    });
    if io {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
