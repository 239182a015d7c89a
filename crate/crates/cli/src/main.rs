//! `openslot` command-line runner.

mod commands;
mod plot;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "openslot", version, about = "Slot-based mixed open-set recognition on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace an existing dataset, backbone or heads file.
    #[arg(long)]
    pub force: bool,
    /// Config overrides, `--key value` or `--key=value` with dotted keys
    /// (`--ans.alpha 0.5`). `--metric`, `--scheme` and `--gamma` are short
    /// for the `scoring.` keys. Must come after the other flags.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum PlotKind {
    Bar,
    Line,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into `paths.data_dir`.
    GenData(Common),
    /// Pretrain the slot backbone and write `paths.checkpoint`.
    Pretrain(Common),
    /// Train classifier heads on frozen slots and write `paths.heads`.
    TrainCls(Common),
    /// Open-set AUROC and FPR@95 on the H and M test sets.
    EvalOsr(Common),
    /// Closed-set accuracy on known test images.
    EvalClosed(Common),
    /// Open-set detection on the test images or on one PNG.
    Detect {
        /// Run on this RGB PNG instead of the benchmark test images.
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Misalignment report and backbone digest.
    Diagnose(Common),
    /// Render metric CSV files to an SVG chart.
    Plot {
        /// Metric CSV files; a line chart uses one x position per file.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = PlotKind::Bar)]
        kind: PlotKind,
        #[arg(long, default_value = "metrics")]
        title: String,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::TrainCls(c) => commands::train_cls(&c),
        Command::EvalOsr(c) => commands::eval_osr(&c),
        Command::EvalClosed(c) => commands::eval_closed(&c),
        Command::Detect { image, common } => commands::detect(&common, image.as_deref()),
        Command::Diagnose(c) => commands::diagnose(&c),
        Command::Plot {
            input,
            kind,
            title,
            common,
        } => commands::plot(&common, &input, kind, &title),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
