//! Command-line driver for the radguard pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::Run;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
}

impl From<radguard::Error> for CliError {
    fn from(e: radguard::Error) -> Self {
        match e {
            radguard::Error::Numerical { .. } | radguard::Error::NonFinite(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "radguard",
    version,
    about = "Adversarial protection for tiny radiance fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file merged over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, copied into every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding one subdirectory per artifact.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Replace an existing artifact directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the scene bank and its ground-truth datasets.
    SceneGen,
    /// Fit one base radiance field per scene.
    TrainField {
        /// Continue existing checkpoints up to the configured step count.
        #[arg(long)]
        resume: bool,
    },
    /// Train the image classifier and the occupancy model.
    TrainDownstream,
    /// Train protection bundles against the downstream models.
    Protect,
    /// Render the test views with or without protection.
    Render {
        #[arg(long, value_enum, default_value = "on")]
        protected: Toggle,
    },
    /// Naturalness and disruption report.
    Eval,
    /// Accuracy of independently trained classifiers on protected renders.
    TransferEval,
    /// Accuracy on protected renders after image transformations.
    RobustnessEval,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = config::resolve(cli.config.as_deref(), cli.seed)?;
    let run = Run {
        config,
        root: cli.out,
        force: cli.force,
    };
    match cli.command {
        Command::SceneGen => commands::scene_gen(&run),
        Command::TrainField { resume } => commands::train_field(&run, resume),
        Command::TrainDownstream => commands::train_downstream(&run),
        Command::Protect => commands::protect(&run),
        Command::Render { protected } => commands::render(&run, protected == Toggle::On),
        Command::Eval => commands::eval(&run),
        Command::TransferEval => commands::transfer_eval(&run),
        Command::RobustnessEval => commands::robustness_eval(&run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
