use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};

use pjdm_cli::commands::is_numerical;
use pjdm_cli::{run, Command, ExperimentConfig, RunOptions};

#[derive(Parser, Debug)]
#[command(
    name = "pjdm",
    version,
    about = "Two-stage projection-domain tracer conversion"
)]
struct Cli {
    /// JSON config (flat schema) or a run manifest. Omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write every sampler iterate during conversion.
    #[arg(long, global = true)]
    debug_dumps: bool,
    /// Print the effective config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the paired, unpaired and held-out synthetic sinograms.
    GenData,
    /// Train the stage-one bridge denoiser.
    TrainBridge {
        /// Continue from the saved checkpoint and optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Train the stage-two refiner.
    TrainRefiner {
        #[arg(long)]
        resume: bool,
    },
    /// Convert tracer-A sinograms (the held-out split by default).
    Convert {
        /// Sinogram files to convert instead of the held-out split.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
    /// Metrics, profile lines and plots for the converted held-out split.
    Evaluate,
    /// CE-only / PR-only / CE+PR comparison on the held-out split.
    Ablate,
}

fn effective_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.debug_dumps |= cli.debug_dumps;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cfg = match effective_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    if cli.print_config {
        println!("{}", cfg.to_json());
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.command else {
        eprintln!("error: no command given (see --help)");
        return ExitCode::from(1);
    };
    let (command, opts) = match cmd {
        Cmd::GenData => (Command::GenData, RunOptions::default()),
        Cmd::TrainBridge { resume } => (
            Command::TrainBridge,
            RunOptions {
                resume,
                ..Default::default()
            },
        ),
        Cmd::TrainRefiner { resume } => (
            Command::TrainRefiner,
            RunOptions {
                resume,
                ..Default::default()
            },
        ),
        Cmd::Convert { inputs } => (
            Command::Convert,
            RunOptions {
                inputs,
                ..Default::default()
            },
        ),
        Cmd::Evaluate => (Command::Evaluate, RunOptions::default()),
        Cmd::Ablate => (Command::Ablate, RunOptions::default()),
    };
    match run(command, &cfg, &opts) {
        Ok(artifacts) => {
            println!(
                "{}: wrote {} artifacts under {}",
                command.name(),
                artifacts.len(),
                cfg.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_numerical(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
