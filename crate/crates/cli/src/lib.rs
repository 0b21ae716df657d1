//! Experiment driver: data → base training → personalization → edit →
//! evaluation → ablations, each step reproducible from one master seed.

pub mod config;
pub mod error;
pub mod image_io;
pub mod pipeline;
pub mod plot;
pub mod record;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "figedit", version = record::VERSION_STR, about = "Score-distillation editing of synthetic figures")]
pub struct Cli {
    /// JSON config merged over the built-in defaults.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set edit.config.guidance.w=7.5`; repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the corpus and train the evaluation probe.
    GenData,
    /// Train the base score network.
    TrainBase,
    /// Personalize a copy of the base net on one subject.
    Finetune,
    /// Run the edit loop on the subject's canvas.
    Edit,
    /// Metrics of the edited canvas.
    Eval,
    /// Run every ablation arm and write the comparison table.
    Ablate,
    /// Write the annealing schedule as CSV.
    AnnealDump,
    /// Plot CSV columns as lines.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        x: String,
        /// Comma-separated column names.
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<String>,
        /// Output path; `.pgm` (and `.png`) are substituted for its extension.
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

/// Runs one command; the error carries the process exit code.
pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::GenData => pipeline::gen_data(&cfg).map(drop),
        Command::TrainBase => pipeline::train_base(&cfg).map(drop),
        Command::Finetune => pipeline::finetune(&cfg).map(drop),
        Command::Edit => pipeline::edit_stage(&cfg).map(drop),
        Command::Eval => pipeline::eval_stage(&cfg).map(drop),
        Command::Ablate => pipeline::ablate_stage(&cfg).map(drop),
        Command::AnnealDump => pipeline::anneal_dump(&cfg).map(drop),
        Command::Plot { input, x, y, output } => plot::plot(input, x, y, output, cfg.output.png),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg.to_value())?);
            Ok(())
        }
    }
}
