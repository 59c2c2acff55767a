mod commands;
mod config;
mod plot;

use clap::{Parser, Subcommand};
use sod_core::SodError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sod", version, about = "Salient-object-detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints, logs, and the resolved config
    Train {
        /// TOML configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set model.use_mre=false
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one grayscale saliency PNG per input image
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of input images
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground-truth masks (mF, MAE, S, E)
    Eval {
        /// Directory of prediction PNGs
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth masks
        #[arg(long)]
        gt: PathBuf,
        /// Report directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the dataset-mean precision-recall curve (CSV + plot)
    Curves {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write side-by-side strips: input | gt | first | second | combined
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of input images
        #[arg(long)]
        images: PathBuf,
        /// Optional directory of ground-truth masks
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score a loss-function x enhancement-block grid
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Loss variants: bce, iou, bce+iou, weighted (repeatable)
        #[arg(long = "loss", default_values = ["weighted"])]
        loss: Vec<String>,
        /// Run with the multi-receptive enhancement on, off, or both
        #[arg(long, default_value = "both", value_parser = ["on", "off", "both"])]
        mre: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Square image size; must be a multiple of 32
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn run(cli: Cli) -> sod_core::Result<()> {
    match cli.cmd {
        Cmd::Train { config, set, out } => {
            let cfg = config::load_run_config(config.as_deref(), &set)?;
            commands::cmd_train(&cfg, &out)
        }
        Cmd::Predict { checkpoint, input, out } => commands::cmd_predict(&checkpoint, &input, &out),
        Cmd::Eval { pred, gt, out } => commands::cmd_eval(&pred, &gt, &out),
        Cmd::Curves { pred, gt, out } => commands::cmd_curves(&pred, &gt, &out),
        Cmd::Visualize { checkpoint, images, gt, out } => {
            commands::cmd_visualize(&checkpoint, &images, gt.as_deref(), &out)
        }
        Cmd::Ablate { config, set, loss, mre, out } => {
            let cfg = config::load_run_config(config.as_deref(), &set)?;
            let kinds = loss
                .iter()
                .map(|s| commands::parse_loss_kind(s))
                .collect::<sod_core::Result<Vec<_>>>()?;
            let mre_values: &[bool] = match mre.as_str() {
                "on" => &[true],
                "off" => &[false],
                _ => &[true, false],
            };
            commands::cmd_ablate(&cfg, &kinds, mre_values, &out)
        }
        Cmd::Synth { out, seed, n, size } => commands::cmd_synth(&out, seed, n, size),
    }
}

fn exit_code(e: &SodError) -> u8 {
    match e {
        SodError::Config(_) | SodError::Dimension(_) | SodError::Checkpoint(_) => 1,
        SodError::Data(_) | SodError::Io(_) | SodError::Image(_) => 2,
        SodError::Numeric(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
