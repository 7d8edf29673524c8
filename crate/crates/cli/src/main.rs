use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfresnet_cli::commands::{
    cmd_compare, cmd_diag, cmd_gen_data, cmd_train, make_deterministic, DiagOptions, TrainOptions,
};
use mfresnet_cli::{Checkpoint, CliError, DiagKind, Outcome, RunConfig};

#[derive(Parser)]
#[command(name = "mfresnet", version, about = "Mean-field residual network training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used for anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded batch reduction (bit-reproducible).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train an ensemble and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run one diagnostic and write its JSON report.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        which: DiagKind,
        /// Diagnose the ensemble stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train both modes over the configured seeds and tabulate final losses.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Write the configured teacher-student data as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common, resume: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    let mut cfg = match (&common.config, resume) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(ck)) => Checkpoint::load(ck)?.config,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if common.deterministic {
        make_deterministic(&mut cfg);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let cfg = load_config(&common, resume.as_ref())?;
            let opts = TrainOptions {
                out: common.out,
                resume,
                stop_after,
            };
            cmd_train(&cfg, &opts)
        }
        Command::Diag {
            common,
            which,
            resume,
        } => {
            let cfg = load_config(&common, resume.as_ref())?;
            cmd_diag(&cfg, which, &DiagOptions { out: common.out, resume })
        }
        Command::Compare { common } => cmd_compare(&load_config(&common, None)?, &common.out),
        Command::GenData { common } => cmd_gen_data(&load_config(&common, None)?, &common.out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
