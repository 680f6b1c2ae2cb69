//! `iirc-lab`: generate benchmarks, run incremental training, sweep exemplar
//! budgets and aggregate run logs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{parse_list, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "iirc-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write hierarchy.json, schedule.json and dataset.csv.
    Gen(GenArgs),
    /// Train and evaluate every (method, seed) pair.
    Run(RunArgs),
    /// Final pw-JS per (method, exemplar budget, seed) into sweep.csv.
    SweepBuffer(RunArgs),
    /// Mean and std over seeds of several run logs into aggregate.json.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// One seed or a comma-separated list.
    #[arg(long)]
    seed: Option<String>,
    /// finetune, baseline-kd, mtkd or k-mtkd; comma-separated for several.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Maximum predictions per sample under Top-k.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Exemplars per class; a comma-separated list for `sweep-buffer`.
    #[arg(long)]
    buffer: Option<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// runlog.json files.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Overrides> {
        Ok(Overrides {
            seeds: self.seed.as_deref().map(parse_list).transpose().context("--seed")?,
            methods: self.method.as_deref().map(parse_list).transpose().context("--method")?,
            out: self.out.clone(),
            k: self.k,
            lambda: self.lambda,
            mu: self.mu,
            buffers: self.buffer.as_deref().map(parse_list).transpose().context("--buffer")?,
        })
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("IIRC_LAB_THREADS") {
        let n: usize = v.parse().with_context(|| format!("IIRC_LAB_THREADS=`{v}` is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gen(a) => {
            let mut cfg = ExperimentConfig::load(a.config.as_deref())?;
            cfg.apply(Overrides {
                seeds: a.seed.map(|s| vec![s]),
                out: a.out,
                ..Overrides::default()
            });
            commands::cmd_gen(&cfg)
        }
        Command::Run(a) => {
            if let Some(ckpt) = &a.resume {
                return commands::cmd_resume(ckpt, a.out.as_deref());
            }
            let mut cfg = ExperimentConfig::load(a.config.as_deref())?;
            cfg.apply(a.overrides()?);
            match cfg.buffers[..] {
                _ if a.buffer.is_none() => {}
                [b] => cfg.train.buffer = b,
                _ => anyhow::bail!("run takes a single --buffer value"),
            }
            commands::cmd_run(&cfg)
        }
        Command::SweepBuffer(a) => {
            if a.resume.is_some() {
                anyhow::bail!("--resume only applies to `run`");
            }
            let mut cfg = ExperimentConfig::load(a.config.as_deref())?;
            cfg.apply(a.overrides()?);
            commands::cmd_sweep_buffer(&cfg)
        }
        Command::Report(a) => commands::cmd_report(&a.logs, a.out.as_deref()),
    }
}
