use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand};
use pdmp_core::engine::{simulate, RunSettings};
use pdmp_core::export::{write_hybrid_path, write_trajectory, TrajectoryKind};
use pdmp_core::langevin::{solve_langevin, NoiseScale};
use pdmp_core::{solve_limit, stream_rng, Schedule};
use pdmp_experiments::config::{ExperimentConfig, Setup, StudyKind};
use pdmp_experiments::run_study;

#[derive(Parser)]
#[command(name = "pdmp", version, about = "Compartmental membrane simulations and limit-theorem studies")]
struct Cli {
    /// Override `execution.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override `execution.workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override `execution.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one hybrid path and export it as JSON lines.
    Simulate {
        config: PathBuf,
        /// Ladder level (finest by default).
        #[arg(long)]
        level: Option<usize>,
        /// Replicate index, i.e. the random stream.
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Solve the deterministic limit and export the trajectory.
    Limit { config: PathBuf },
    /// Integrate one Langevin path and export it.
    Langevin {
        config: PathBuf,
        #[arg(long)]
        level: Option<usize>,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Run a study and write report.json, metrics.csv and figures.
    Study { kind: StudyKind, config: PathBuf },
    /// Parse and check a configuration file.
    ValidateConfig { config: PathBuf },
}

impl Cli {
    fn load(&self, path: &Path) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.execution.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.execution.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.execution.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    println!("writing {}", path.display());
    Ok(BufWriter::new(f))
}

fn pick_level(cfg: &ExperimentConfig, level: Option<usize>) -> Result<usize> {
    let l = level.unwrap_or_else(|| cfg.level());
    ensure!(l < cfg.model.ladder.len(), "level {l} outside the ladder");
    Ok(l)
}

fn schedule(cfg: &ExperimentConfig) -> Schedule {
    Schedule {
        t_end: cfg.study.t_end,
        dt: cfg.study.dt,
        cadence: Some(cfg.study.cadence),
    }
}

/// Returns whether all verdicts passed.
fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Simulate { config, level, replicate } => {
            let cfg = cli.load(config)?;
            let setup = Setup::new(&cfg)?;
            let level = pick_level(&cfg, *level)?;
            let model = setup.model(level)?;
            let settings = RunSettings {
                t_end: cfg.study.t_end,
                method: cfg.study.method,
                cadence: Some(cfg.study.cadence),
            };
            let path = simulate(&model, setup.hybrid_initial(level)?, settings, cfg.execution.seed, *replicate)?;
            let mut w = create(&cfg.execution.out, "path.jsonl")?;
            write_hybrid_path(&mut w, &path, &model.partition, &cfg.hash())?;
            println!("{} jumps, {} snapshots", path.jumps.len(), path.snapshots.len());
            Ok(true)
        }
        Command::Limit { config } => {
            let cfg = cli.load(config)?;
            let setup = Setup::new(&cfg)?;
            let traj = solve_limit(&setup.kinetics, &setup.operator, &setup.limit_initial(), schedule(&cfg))?;
            let mut w = create(&cfg.execution.out, "limit.jsonl")?;
            write_trajectory(&mut w, TrajectoryKind::Deterministic, &traj, &cfg.hash(), cfg.execution.seed, 0)?;
            Ok(true)
        }
        Command::Langevin { config, level, replicate } => {
            let cfg = cli.load(config)?;
            let setup = Setup::new(&cfg)?;
            let level = pick_level(&cfg, *level)?;
            let alpha = cfg.study.alpha.unwrap_or_else(|| setup.ladder[level].stats().alpha());
            let mut rng = stream_rng(cfg.execution.seed, *replicate);
            let run = solve_langevin(
                &setup.kinetics,
                &setup.operator,
                &setup.limit_initial(),
                schedule(&cfg),
                NoiseScale::from_alpha(alpha)?,
                &mut rng,
            )?;
            let mut w = create(&cfg.execution.out, "langevin.jsonl")?;
            write_trajectory(&mut w, TrajectoryKind::Langevin, &run.trajectory, &cfg.hash(), cfg.execution.seed, *replicate)?;
            let s = run.stats;
            println!(
                "alpha {alpha}: {} steps, {} with P outside [0, 1] (max {}), {} with clamped covariance",
                s.steps, s.p_excursion_steps, s.p_max_excursion, s.clamp_steps
            );
            Ok(true)
        }
        Command::Study { kind, config } => {
            let mut cfg = cli.load(config)?;
            cfg.study.kind = *kind;
            cfg.validate()?;
            let started = Instant::now();
            let report = run_study(&cfg)?;
            let elapsed = started.elapsed().as_secs_f64();
            for path in report.emit(&cfg.execution.out)? {
                println!("writing {}", path.display());
            }
            let timing = serde_json::json!({ "study": kind.name(), "wall_seconds": elapsed, "workers": cfg.execution.workers });
            std::fs::write(cfg.execution.out.join("timing.json"), format!("{timing:#}\n"))?;
            for v in &report.verdicts {
                println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
            }
            for n in &report.notes {
                println!("note: {n}");
            }
            Ok(report.passed())
        }
        Command::ValidateConfig { config } => {
            let cfg = cli.load(config)?;
            Setup::new(&cfg)?;
            println!("ok: {} study, config hash {}", cfg.study.kind.name(), cfg.hash());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
