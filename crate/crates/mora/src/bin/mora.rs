//! Command line entry point. Exit codes: 0 on success, 1 for usage or
//! config problems, 2 for runtime failures (I/O, corrupt checkpoints,
//! numerical errors).

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use mora::commands::{cmd_ablate, cmd_analyze, cmd_pretrain, cmd_train, SweepAxis};
use mora::config::{RunConfig, RunMode};
use mora::MoraError;

#[derive(Parser)]
#[command(
    name = "mora",
    version,
    about = "Continual learning with self-activated rank-1 adapter mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's run mode (e.g. self_adaptive, router_lora).
    #[arg(long)]
    mode: Option<String>,
    /// Output directory. Defaults to $MORA_OUT_ROOT/<command> or
    /// runs/<command>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the shared trunk and report train/held-out quality.
    Pretrain(RunArgs),
    /// Run the continual benchmark, checkpointing after every task.
    Train {
        #[command(flatten)]
        args: RunArgs,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rerun the benchmark across one hyperparameter axis.
    Ablate {
        #[command(flatten)]
        args: RunArgs,
        /// Axis to sweep: budget, tau, delta, or mode.
        #[arg(long)]
        sweep: String,
    },
    /// Inspect a trained model's gating behavior.
    Analyze {
        #[command(flatten)]
        args: RunArgs,
        /// Checkpoint directory to analyze instead of retraining.
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> mora::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            MoraError::Io(io) => {
                MoraError::InvalidConfig(format!("cannot read {}: {io}", path.display()))
            }
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = RunMode::from_str(mode)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(args: &RunArgs, command: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        std::env::var_os("MORA_OUT_ROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

fn run(cli: Cli) -> mora::Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = load_config(&args)?;
            cmd_pretrain(&cfg, &out_dir(&args, "pretrain"))
        }
        Command::Train { args, resume } => {
            let cfg = load_config(&args)?;
            cmd_train(&cfg, &out_dir(&args, "train"), resume.as_deref())
        }
        Command::Ablate { args, sweep } => {
            let cfg = load_config(&args)?;
            let axis = SweepAxis::from_str(&sweep)?;
            cmd_ablate(&cfg, axis, &out_dir(&args, "ablate"))
        }
        Command::Analyze { args, base } => {
            let cfg = load_config(&args)?;
            cmd_analyze(&cfg, base.as_deref(), &out_dir(&args, "analyze"))
        }
    }
}

fn exit_for(err: &MoraError) -> ExitCode {
    match err {
        MoraError::InvalidConfig(_) | MoraError::InvalidBudget => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
