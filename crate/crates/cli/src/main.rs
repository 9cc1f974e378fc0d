use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use siammask_core::{BoxStrategy, Variant};

mod commands;

/// Siamese tracking and segmentation on synthetic video.
#[derive(Debug, Parser)]
#[command(name = "siammask", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the `track.box_strategy` key.
    #[arg(long, global = true, value_enum)]
    box_strategy: Option<StrategyArg>,
    /// Overrides the `variant` key.
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Minmax,
    Mbr,
    Opt,
}

impl From<StrategyArg> for BoxStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Minmax => BoxStrategy::MinMax,
            StrategyArg::Mbr => BoxStrategy::Mbr,
            StrategyArg::Opt => BoxStrategy::Opt,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    #[value(name = "2b")]
    TwoBranch,
    #[value(name = "3b")]
    ThreeBranch,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::TwoBranch => Variant::TwoBranch,
            VariantArg::ThreeBranch => Variant::ThreeBranch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Tracking,
    Vos,
    Oracle,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write `data.sequences` synthetic sequences under --out.
    Synth,
    /// Train on pairs sampled from a synthetic dataset.
    Train {
        /// Dataset directory written by `synth`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Track every sequence of a directory from its first-frame ground truth.
    Track {
        /// Checkpoint written by `train`; its config.txt sits next to it.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// A sequence directory or a dataset of them.
        #[arg(long, value_name = "DIR")]
        seq: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long, value_enum)]
        protocol: Protocol,
        /// Output of `track` (unused by the oracle protocol).
        #[arg(long, value_name = "DIR")]
        pred: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
    },
    /// Finite-difference check of every operation and both training objectives.
    Gradcheck {
        /// Also run the deliberately corrupted derivative, which must fail.
        #[arg(long, hide = true)]
        fixture: bool,
    },
    /// Tabulate the records of several eval outputs.
    Report {
        /// Directories holding a report.txt.
        #[arg(required = true, value_name = "DIR")]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
