use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use platewaste::metrics::Averaging;
use platewaste::nets::Family;
use platewaste::Error;

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "platewaste", version, about = "Plate waste estimation from segmentation masks")]
pub struct Cli {
    /// Run configuration (JSON); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, env = "PLATEWASTE_OUT")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    #[arg(long, value_parser = PossibleValuesParser::new(["unet", "unetpp", "unet++"]).map(|s| s.parse::<Family>().expect("checked by clap")))]
    pub arch: Option<Family>,

    /// Channels at the first encoder level.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalFlags {
    #[arg(long, value_parser = PossibleValuesParser::new(["macro", "weighted"]).map(|s| s.parse::<Averaging>().expect("checked by clap")))]
    pub aggregation: Option<Averaging>,

    /// Count the background class when averaging.
    #[arg(long)]
    pub include_background: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic plate dataset.
    Synth {
        /// `table6` writes the five waste-table fixtures; `train` a
        /// three-class training set with splits assigned.
        #[arg(long, default_value = "train", value_parser = ["train", "table6"])]
        kind: String,
        /// Full generator spec (JSON); overrides --kind.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 80)]
        count: usize,
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Expand the train split with the augmentation pipeline.
    Augment {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        multiplier: Option<usize>,
        /// Augmentation preset (food type); defaults to the manifest's.
        #[arg(long)]
        preset: Option<String>,
        /// Augment every copy instead of keeping the original first.
        #[arg(long)]
        all_augmented: bool,
    },
    /// Train a model on the train split, selecting on the val split.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Constant learning rate instead of the tiered schedule.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Score a checkpoint (or a directory of predicted masks) on a split.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "pred_dir")]
        checkpoint: Option<PathBuf>,
        /// Predicted masks named like the ground-truth mask files.
        #[arg(long, conflicts_with = "checkpoint")]
        pred_dir: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
        split: String,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Write predicted masks for PNG images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image files or directories of PNGs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Eating and remaining rates per class from pre/post masks.
    Estimate {
        /// One manifest per food type; repeatable.
        #[arg(long)]
        manifest: Vec<PathBuf>,
        #[arg(long, action = clap::ArgAction::Set, value_name = "BOOL")]
        clamp_eating_rate: Option<bool>,
    },
    /// Per-class proportion histograms of pre and post masks.
    Hist {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Train-step and inference throughput.
    Bench {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 3)]
        iters: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 3,
        Error::Io(e) if e.kind() != std::io::ErrorKind::NotFound => 3,
        _ => 2,
    }
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
            ExitCode::from(exit_code(&e))
        }
    }
}
