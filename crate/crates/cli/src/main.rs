//! `logitreg`: configuration-driven adversarial-robustness experiments.
//!
//! Exit status: 0 on success, 1 for configuration or usage errors, 2 for
//! runtime failures inside the pipeline.

mod artifacts;
mod checkpoint;
mod config;
mod render;
mod runner;

use clap::{Parser, Subcommand, ValueEnum};
use config::ExperimentConfig;
use render::Format;
use runner::RunError;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Format {
        match f {
            FormatArg::Markdown => Format::Markdown,
            FormatArg::Csv => Format::Csv,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "logitreg",
    version,
    about = "Train, attack, and evaluate logit-regularized robust models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config, then evaluate and write all artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the training and evaluation seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
        format: FormatArg,
    },
    /// Evaluate an existing checkpoint; skips training entirely.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
        format: FormatArg,
    },
    /// Black-box transfer matrix across two or more checkpoints.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable; row and column labels come from the file stems.
        #[arg(long = "checkpoint", required = true, num_args = 1)]
        checkpoints: Vec<PathBuf>,
        /// Attack used for generation: natural, fgsm, pgd-N, or spsa.
        #[arg(long, default_value = "fgsm")]
        attack: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
        format: FormatArg,
    },
    /// Gradient-masking, logit-statistics, and pairing-gradient probes.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge stored report.json files into one table on stdout.
    Report {
        /// One or more report.json paths.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
        format: FormatArg,
    },
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig, RunError> {
    let mut config = config::parse_config(path)
        .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        config.training.seed = s;
        config.evaluation.seed = s;
    }
    if let Some(o) = out {
        config.out_dir = o;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<String, RunError> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            format,
        } => {
            let config = load_config(&config, seed, out)?;
            runner::cmd_train(&config, format.into())
        }
        Command::Evaluate {
            config,
            checkpoint,
            seed,
            out,
            format,
        } => {
            let config = load_config(&config, seed, out)?;
            runner::cmd_evaluate(&config, &checkpoint, format.into())
        }
        Command::Transfer {
            config,
            checkpoints,
            attack,
            seed,
            out,
            format,
        } => {
            let config = load_config(&config, seed, out)?;
            runner::cmd_transfer(&config, &checkpoints, &attack, format.into())
        }
        Command::Probe {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let config = load_config(&config, seed, out)?;
            runner::cmd_probe(&config, &checkpoint)
        }
        Command::Report { inputs, format } => runner::cmd_report(&inputs, format.into()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(output) => print!("{output}"),
        Err(RunError::Config(m)) => {
            eprintln!("error: {m}");
            std::process::exit(1);
        }
        Err(RunError::Runtime(m)) => {
            eprintln!("error: {m}");
            std::process::exit(2);
        }
    }
}
