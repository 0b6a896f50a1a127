use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use gadapter_lab::experiment::{Experiment, RunOptions, Subcommand};

/// Log verbosity is read from `GADAPTER_LOG` (e.g. `info`, `debug`).
#[derive(Parser, Debug)]
#[command(name = "gadapter-lab", version, about = "Structure-aware PEFT lab for graph transformers")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel worker slots for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Added to every configured seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    GenData,
    Pretrain,
    Finetune,
    Ablate,
    Diagnose,
    Profile,
    Report,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::GenData => Subcommand::GenData,
            Command::Pretrain => Subcommand::Pretrain,
            Command::Finetune => Subcommand::Finetune,
            Command::Ablate => Subcommand::Ablate,
            Command::Diagnose => Subcommand::Diagnose,
            Command::Profile => Subcommand::Profile,
            Command::Report => Subcommand::Report,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GADAPTER_LOG", "info")).init();
    let cli = Cli::parse();
    let options = RunOptions {
        out: cli.out,
        jobs: cli.jobs,
        seed_offset: cli.seed_offset,
    };
    let result = Experiment::load(&cli.config, &options).and_then(|exp| exp.run(cli.command.into()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
