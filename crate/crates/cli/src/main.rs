mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "kgpl", version, about = "Knowledge-guided prompt learning on brain MRI phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Backbone {
    Unet,
    Unetr,
    Swin,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Tissue,
    Structure,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Init {
    Knowledge,
    Random,
    Full,
}

/// Overrides applied on top of the config file.
#[derive(clap::Args, Debug, Default)]
pub struct Overrides {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the checkpoint and log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    Phantoms {
        /// Phantom spec (TOML or JSON); defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Train/val/test fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
    },
    /// Train every partition of a fresh model on boundary-corrupted labels.
    Pretrain {
        #[arg(long, value_enum)]
        backbone: Backbone,
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Fine-tune a pretrained checkpoint on clean labels.
    Finetune {
        #[arg(long, value_enum)]
        init: Init,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the tissue→structure cascade on a split and write DSC/ASD tables.
    Evaluate {
        #[arg(long)]
        tissue_ckpt: PathBuf,
        #[arg(long)]
        structure_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; both `.json` and `.csv` are written next to each other.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Paired per-class deltas (b - a) and a paired t-test between two reports.
    Compare {
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantoms { spec, count, out, seed, ratios } => commands::phantoms(spec.as_deref(), count, &out, seed, &ratios),
        Command::Pretrain { backbone, stage, config, overrides } => {
            commands::pretrain(backbone, stage, config.as_deref(), &overrides)
        }
        Command::Finetune { init, ckpt, config, overrides } => commands::finetune(init, &ckpt, config.as_deref(), &overrides),
        Command::Evaluate { tissue_ckpt, structure_ckpt, data, out, split } => {
            commands::evaluate(&tissue_ckpt, &structure_ckpt, &data, &out, &split)
        }
        Command::Compare { reports, out } => commands::compare(&reports[0], &reports[1], &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(1)
        }
    }
}
