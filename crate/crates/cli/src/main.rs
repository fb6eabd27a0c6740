use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capmil::{Error, Result};
use capmil_cli::ablate::cmd_ablate;
use capmil_cli::config::{ExperimentConfig, SweepAxis};
use capmil_cli::run::{cmd_eval, cmd_gen, cmd_train};
use capmil_cli::sweep::cmd_sweep;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "capmil",
    version,
    about = "Siamese MIL experiments on synthetic bags"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/validation/test JSONL splits.
    Gen(Common),
    /// Train `rounds` models and test each one.
    Train(Common),
    /// Score the test split with a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Repeat training across training-set sizes or bag sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// train_size or bag_size; overrides `sweep_axis`.
        #[arg(long)]
        axis: Option<String>,
    },
    /// Add CAP components one at a time and report each change.
    Ablate(Common),
}

fn setup(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("no output directory (--out or `out`)".into()))?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Gen(c) => {
            let (cfg, out) = setup(&c)?;
            cmd_gen(&cfg, &out)?;
            Ok(out)
        }
        Command::Train(c) => {
            let (cfg, out) = setup(&c)?;
            cmd_train(&cfg, &out)?;
            Ok(out)
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, out) = setup(&common)?;
            cmd_eval(&cfg, &checkpoint, &out)?;
            Ok(out)
        }
        Command::Sweep { common, axis } => {
            let (cfg, out) = setup(&common)?;
            let axis = match axis {
                Some(a) => a.parse()?,
                None => cfg.sweep.axis.unwrap_or(SweepAxis::TrainSize),
            };
            cmd_sweep(&cfg, axis, &out)?;
            Ok(out)
        }
        Command::Ablate(c) => {
            let (cfg, out) = setup(&c)?;
            cmd_ablate(&cfg, &out)?;
            Ok(out)
        }
    }
}

fn report(out: &Path) {
    println!("wrote {}", out.display());
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            report(&out);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
