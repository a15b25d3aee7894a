//! `boltzppo` command line: train, batch-compare, report and validate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boltzppo::cyber_env::{no_op_return, perfect_defense_return};
use boltzppo::harness::{
    compare_report, find_runs, load_run, resume_run, run_batch, run_dir, run_experiment,
    ExperimentConfig, PlateauConfig, RunMetrics,
};
use boltzppo::sampler::Backend;
use boltzppo::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "boltzppo",
    version,
    about = "PPO with Boltzmann-machine free-energy heads"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the configured variant for every seed.
    Run {
        #[command(flatten)]
        opts: RunOpts,
        /// Continue a run from its checkpoint.json instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train all four policy/value head combinations and write a report.
    Batch {
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Compare finished runs found below the given directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write the report (default: the first directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Take plateau settings from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Episode returns of the scripted perfect defender and of never acting.
    Baselines {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunOpts {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seed list, replacing the config's.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampler backend for every DBM head.
    #[arg(long)]
    backend: Option<Backend>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Write a per-timestep trace.csv in each run directory.
    #[arg(long)]
    trace: bool,
}

impl RunOpts {
    fn load(&self) -> boltzppo::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = &self.seed {
            cfg.seeds = s.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(b) = self.backend {
            cfg.set_backend(b);
        }
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        cfg.trace |= self.trace;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 3,
        Error::Config(_)
        | Error::Toml(_)
        | Error::InvalidTopology(_)
        | Error::InvalidParameter(_)
        | Error::SupportCapExceeded { .. } => 2,
        _ => 1,
    }
}

fn summarize(runs: &[RunMetrics]) {
    for r in runs {
        let last = r
            .moving_average
            .last()
            .map(|x| format!("{x:.3}"))
            .unwrap_or_else(|| "-".into());
        let plateau = r
            .plateau_episode
            .map(|p| p.to_string())
            .unwrap_or_else(|| "-".into());
        println!(
            "{} seed {}: {} episodes, last moving average {last}, plateau episode {plateau}",
            r.variant,
            r.seed,
            r.episodes.len()
        );
    }
}

fn report(dirs: &[PathBuf], out: Option<&Path>, config: Option<&Path>) -> boltzppo::Result<()> {
    let plateau = match config {
        Some(c) => ExperimentConfig::load(c)?.plateau,
        None => PlateauConfig::default(),
    };
    let mut runs = Vec::new();
    for d in dirs {
        for r in find_runs(d)? {
            runs.push(load_run(&r, &plateau)?);
        }
    }
    if runs.is_empty() {
        return Err(Error::Config("no run directories found".into()));
    }
    let rep = compare_report(&runs, &plateau)?;
    let out = out.unwrap_or(&dirs[0]);
    rep.write(out, &runs)?;
    print!("{}", rep.table());
    Ok(())
}

fn main_inner(cli: Cli) -> boltzppo::Result<()> {
    match cli.cmd {
        Cmd::Run { opts, resume } => {
            let runs = match resume {
                Some(ckpt) => {
                    let dir = match &opts.out {
                        Some(o) => o.clone(),
                        None => ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
                    };
                    vec![resume_run(&ckpt, &dir)?]
                }
                None => {
                    let cfg = opts.load()?;
                    let runs = run_experiment(&cfg)?;
                    for r in &runs {
                        println!(
                            "wrote {}",
                            run_dir(&cfg.output_dir, &r.variant, r.seed).display()
                        );
                    }
                    runs
                }
            };
            summarize(&runs);
        }
        Cmd::Batch { opts } => {
            let cfg = opts.load()?;
            let (runs, rep) = run_batch(&cfg)?;
            summarize(&runs);
            print!("{}", rep.table());
            println!("report written to {}", cfg.output_dir.display());
        }
        Cmd::Report { dirs, out, config } => report(&dirs, out.as_deref(), config.as_deref())?,
        Cmd::Baselines { config, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let spec = cfg.env.resolve_spec(Path::new("."))?;
            for s in seed.unwrap_or(cfg.seeds) {
                println!(
                    "seed {s}: perfect defense {}, no-op {}",
                    perfect_defense_return(&spec, s)?,
                    no_op_return(&spec, s)?
                );
            }
        }
        Cmd::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!(
                "ok: variant {}, {} episodes, seeds {:?}",
                cfg.variant_name(),
                cfg.episodes,
                cfg.seeds
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
