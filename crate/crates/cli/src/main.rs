use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ppn_cli::commands;

#[derive(Parser)]
#[command(name = "ppn", about = "Pooling-pyramid and SSD detectors: analysis, toy training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP counts.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Second config; ratios are reported as this one over --config.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Train and write weights plus a loss CSV next to them.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// AP and per-level calibration as JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Defaults to the config's held-out synthetic set.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Detections for one PPM image, one JSON object per line.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Median per-layer and per-stage forward timings.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
        /// Defaults to seeded initial weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Write the config's synthetic dataset as PPM files plus groundtruth.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the held-out split instead of the training split.
        #[arg(long)]
        held_out: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = io::stdout().lock();
    let result = match cli.command {
        Command::Analyze { config, compare } => commands::analyze(&config, compare.as_deref(), &mut stdout),
        Command::Train { config, out, dataset, steps } => commands::train(&config, &out, dataset.as_deref(), steps),
        Command::Eval { config, weights, dataset } => commands::eval(&config, &weights, dataset.as_deref(), &mut stdout),
        Command::Infer { config, weights, image } => commands::infer(&config, &weights, &image, &mut stdout),
        Command::Bench { config, repeat, weights } => commands::bench(&config, weights.as_deref(), repeat, &mut stdout),
        Command::Dataset { config, out, held_out } => commands::dataset(&config, &out, held_out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
