use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sspcm_cli::commands::{self, parse_image_size, AnalyzeArgs, EvalArgs, GenDataArgs, TrainArgs};
use sspcm_cli::CliError;
use sspcm_core::geometry::GridDims;
use sspcm_core::{Method, Split};

#[derive(Parser)]
#[command(name = "sspcm", version, about = "Semi-supervised stick-figure pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Supervised,
    Dual,
    Sspcm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Labeled,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        labeled: usize,
        #[arg(long, default_value_t = 1500)]
        unlabeled: usize,
        #[arg(long, default_value_t = 300)]
        test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Image size as WxH.
        #[arg(long, default_value = "48x64", value_parser = parse_image_size)]
        image_size: GridDims,
    },
    /// Train a run into a fresh run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the method in the config file.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// PCK of a parameter snapshot on a labeled split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        /// Output path; defaults to eval.json next to the snapshot.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Confidence and position-inconsistency analysis of a run's teachers.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        epoch: usize,
        #[arg(long)]
        out: PathBuf,
        /// Confidence threshold; defaults to the run's.
        #[arg(long)]
        tau: Option<f64>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData {
            out,
            labeled,
            unlabeled,
            test,
            seed,
            image_size,
        } => commands::gen_data(&GenDataArgs {
            out,
            labeled,
            unlabeled,
            test,
            seed,
            image_size,
        }),
        Command::Train {
            data,
            config,
            out,
            method,
            seed,
            force,
        } => commands::train(&TrainArgs {
            data,
            config,
            out,
            method: method.map(|m| match m {
                MethodArg::Supervised => Method::Supervised,
                MethodArg::Dual => Method::Dual,
                MethodArg::Sspcm => Method::Sspcm,
            }),
            seed,
            force,
        }),
        Command::Eval {
            data,
            params,
            split,
            alpha,
            json,
        } => commands::eval(&EvalArgs {
            data,
            params,
            split: match split {
                SplitArg::Labeled => Split::Labeled,
                SplitArg::Test => Split::Test,
            },
            alpha,
            json,
        }),
        Command::Analyze {
            data,
            run,
            epoch,
            out,
            tau,
        } => commands::analyze(&AnalyzeArgs {
            data,
            run,
            epoch,
            out,
            tau,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `sspcm --help` for usage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
