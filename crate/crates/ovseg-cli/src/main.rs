//! `ovseg`: train, run, and inspect the open-vocabulary segmentation
//! pipeline from the command line. Exit codes: 0 success, 1 usage or
//! configuration error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ovseg_core::Error;

mod commands;
mod config;

use commands::{Stage, SubsetMode};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "ovseg", version, about = "Open-vocabulary semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args)]
struct Common {
    /// Configuration file: flat `key = value` lines under `[section]`
    /// headers. Flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override for both parameter init and batch sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

/// Sliding-window protocol overrides.
#[derive(Args)]
struct WindowArgs {
    /// Side length images are resized to before windowing.
    #[arg(long)]
    eval_size: Option<usize>,
    /// Window side length.
    #[arg(long)]
    window: Option<usize>,
    /// Stride between window origins.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding images/ and masks/.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Class-name file, one name per line.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Train on the built-in synthetic set.
        #[arg(long)]
        synthetic: bool,
        /// Iteration count override.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Segment images with a trained checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class-name file, one name per line.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Also write color renders and a palette.tsv legend.
        #[arg(long)]
        palette: bool,
        /// Input images.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate a checkpoint over an image/mask directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Dataset directory holding images/ and masks/.
        #[arg(long)]
        dataset: PathBuf,
        /// Report mIoU with every class included (default).
        #[arg(long)]
        with_background: bool,
        /// Also report mIoU with the background class dropped.
        #[arg(long)]
        without_background: bool,
        /// Index of the background class for --without-background.
        #[arg(long, default_value_t = 0)]
        background_index: usize,
        /// Echo ground truth instead of predicting; pins the 100.0
        /// upper bound of the harness.
        #[arg(long)]
        oracle_model: bool,
    },
    /// Export per-class cost maps as grayscale images.
    ExportCostmaps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        window: WindowArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Pipeline stage to render.
        #[arg(long, value_enum, default_value_t = Stage::Raw)]
        stage: Stage,
        /// Input image.
        image: PathBuf,
    },
    /// Write a class-vocabulary file (curated or seeded random subset).
    PrepareSubset {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = SubsetMode::Curated)]
        mode: SubsetMode,
        /// Raw class list to sample from (random mode).
        #[arg(long)]
        raw_list: Option<PathBuf>,
        /// Sample size (random mode).
        #[arg(long)]
        size: Option<usize>,
    },
}

fn build_config(common: &Common, window: Option<&WindowArgs>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.model.master_seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(w) = window {
        if let Some(v) = w.eval_size {
            cfg.window.eval_resolution = v;
        }
        if let Some(v) = w.window {
            cfg.window.window = v;
        }
        if let Some(v) = w.stride {
            cfg.window.stride = v;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { common, dataset, vocab, synthetic, iterations } => {
            let mut cfg = build_config(&common, None)?;
            if let Some(dir) = dataset {
                // an explicit dataset beats a synthetic source from the file
                cfg.data.dataset_dir = Some(dir);
                cfg.data.synthetic = false;
            }
            if let Some(v) = vocab {
                cfg.data.vocabulary = Some(v);
            }
            if synthetic {
                cfg.data.synthetic = true;
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            commands::cmd_train(&cfg)
        }
        Command::Predict { common, window, checkpoint, vocab, palette, images } => {
            let mut cfg = build_config(&common, Some(&window))?;
            if let Some(v) = vocab {
                cfg.data.vocabulary = Some(v);
            }
            commands::cmd_predict(&cfg, &checkpoint, &images, palette)
        }
        Command::Eval {
            common,
            window,
            checkpoint,
            vocab,
            dataset,
            with_background,
            without_background,
            background_index,
            oracle_model,
        } => {
            let mut cfg = build_config(&common, Some(&window))?;
            if let Some(v) = vocab {
                cfg.data.vocabulary = Some(v);
            }
            commands::cmd_eval(
                &cfg,
                checkpoint.as_deref(),
                &dataset,
                with_background,
                without_background,
                background_index,
                oracle_model,
            )
        }
        Command::ExportCostmaps { common, window, checkpoint, vocab, stage, image } => {
            let mut cfg = build_config(&common, Some(&window))?;
            if let Some(v) = vocab {
                cfg.data.vocabulary = Some(v);
            }
            commands::cmd_export_costmaps(&cfg, &checkpoint, &image, stage)
        }
        Command::PrepareSubset { common, mode, raw_list, size } => {
            let cfg = build_config(&common, None)?;
            let seed = common.seed.unwrap_or(0);
            commands::cmd_prepare_subset(&cfg, mode, raw_list.as_deref(), size, seed)
        }
    }
}

/// Config and validation problems exit 1; failures past validation
/// (I/O, corrupt checkpoints, aborted training) exit 2.
fn classify(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Validation(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here with non-error kinds.
            let usage_error = e.use_stderr();
            let _ = e.print();
            return if usage_error { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}
