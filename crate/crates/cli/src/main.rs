//! Command-line front end for the vessel-tree registration pipeline.
//!
//! Subcommands: `synth` (generate a benchmark dataset), `train` (fit the
//! descriptor network), `detect`, `describe`, `match` (the individual
//! pipeline stages), `register` (full single-pass registration), `eval`
//! (registration-score reports) and `vtkrs` (variable top-keypoint sweep).

mod commands;
mod config;
mod util;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;

#[derive(Parser)]
#[command(
    name = "vesselreg",
    version,
    about = "Keypoint-based vessel-tree image registration"
)]
struct Cli {
    /// Optional key = value configuration file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all random substreams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: training images plus registration cases.
    Synth(SynthArgs),
    /// Train the descriptor network on a dataset's training images.
    Train(TrainArgs),
    /// Extract keypoints from a heatmap into a CSV.
    Detect(DetectArgs),
    /// Compute the dense descriptor block of an image.
    Describe(DescribeArgs),
    /// Mutually match two descriptor sets class by class.
    Match(MatchArgs),
    /// Register a moving image onto a fixed image (single pass).
    Register(RegisterArgs),
    /// Score predicted homographies against a dataset manifest.
    Eval(EvalArgs),
    /// Variable top-keypoint registration score over a dataset.
    Vtkrs(VtkrsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Total number of registration cases.
    #[arg(long, default_value_t = 10)]
    cases: usize,
    /// Category mix (S, P, A) the case count is apportioned by.
    #[arg(long, default_value = "71,49,14")]
    ratios: String,
    /// Number of standalone training images.
    #[arg(long)]
    train_images: Option<usize>,
    /// Image size in pixels (square).
    #[arg(long)]
    size: Option<usize>,
    /// Crossovers per image.
    #[arg(long)]
    crossovers: Option<usize>,
    /// Bifurcations per image.
    #[arg(long)]
    bifurcations: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV output path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    /// Descriptor dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Hidden channels, comma separated.
    #[arg(long)]
    hidden: Option<String>,
    /// Stop after this many steps regardless of epochs.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Evaluate matching precision on this many held-out cases after training.
    #[arg(long, default_value_t = 0)]
    val_pairs: usize,
}

#[derive(Args)]
struct DetectArgs {
    /// Heatmap file (.ckdb float block or 8-bit 3-channel image).
    #[arg(long)]
    heatmap: PathBuf,
    /// Keypoint CSV output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    window_radius: Option<usize>,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Descriptor block output (.ckdb).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    fixed_desc: PathBuf,
    #[arg(long)]
    fixed_keypoints: PathBuf,
    #[arg(long)]
    moving_desc: PathBuf,
    #[arg(long)]
    moving_keypoints: PathBuf,
    /// Match CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    /// Fixed image (single-pair mode).
    #[arg(long)]
    fixed: Option<PathBuf>,
    /// Moving image (single-pair mode).
    #[arg(long)]
    moving: Option<PathBuf>,
    /// Register every case of a dataset directory instead of one pair.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Use the dataset's ground-truth keypoint CSVs as the detector.
    #[arg(long)]
    oracle_keypoints: bool,
    /// Directory of externally produced heatmaps (<id>_fixed / <id>_moving).
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    /// Fixed-image heatmap (single-pair mode).
    #[arg(long)]
    fixed_heatmap: Option<PathBuf>,
    /// Moving-image heatmap (single-pair mode).
    #[arg(long)]
    moving_heatmap: Option<PathBuf>,
    /// Fixed-image keypoint CSV (single-pair mode).
    #[arg(long)]
    fixed_keypoints: Option<PathBuf>,
    /// Moving-image keypoint CSV (single-pair mode).
    #[arg(long)]
    moving_keypoints: Option<PathBuf>,
    /// Output directory (homography.txt, matches.csv, timing.csv).
    #[arg(long)]
    out: PathBuf,
    /// Keypoint upscaling from detection to test resolution, `sx,sy`.
    #[arg(long)]
    scale: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of predicted homographies (<id>.txt).
    #[arg(long)]
    predictions: PathBuf,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VtkrsArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Use the dataset's ground-truth keypoint CSVs as the detector.
    #[arg(long, default_value_t = true)]
    oracle_keypoints: bool,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = effective_config(&cli)?;
    match &cli.command {
        Command::Synth(args) => {
            if let Some(size) = args.size {
                cfg.synth_size = size;
            }
            if let Some(n) = args.train_images {
                cfg.synth_train_images = n;
            }
            if let Some(n) = args.crossovers {
                cfg.synth_crossovers = n;
            }
            if let Some(n) = args.bifurcations {
                cfg.synth_bifurcations = n;
            }
            cfg.validate()?;
            print!("{}", cfg.echo());
            commands::synth(&cfg, &args.out, args.cases, &args.ratios)
        }
        Command::Train(args) => {
            if let Some(loss) = &args.loss {
                cfg.set("train.loss", loss)?;
            }
            if let Some(views) = args.views {
                cfg.train_views = views;
            }
            if let Some(epochs) = args.epochs {
                cfg.train_epochs = epochs;
            }
            if let Some(lr) = args.learning_rate {
                cfg.train_learning_rate = lr;
            }
            if let Some(opt) = &args.optimizer {
                cfg.set("train.optimizer", opt)?;
            }
            if let Some(dim) = args.dim {
                cfg.net_dim = dim;
            }
            if let Some(hidden) = &args.hidden {
                cfg.set("net.hidden", hidden)?;
            }
            cfg.validate()?;
            print!("{}", cfg.echo());
            commands::train(
                &cfg,
                &args.data,
                &args.out,
                args.report.as_deref(),
                args.max_steps,
                args.val_pairs,
            )
        }
        Command::Detect(args) => {
            if let Some(t) = args.threshold {
                cfg.peak_threshold = t;
            }
            if let Some(w) = args.window_radius {
                cfg.peak_window_radius = w;
            }
            cfg.validate()?;
            print!("{}", cfg.echo());
            commands::detect(&cfg, &args.heatmap, &args.out)
        }
        Command::Describe(args) => {
            cfg.validate()?;
            print!("{}", cfg.echo());
            commands::describe(&args.image, &args.checkpoint, &args.out)
        }
        Command::Match(args) => {
            cfg.validate()?;
            print!("{}", cfg.echo());
            commands::match_descriptors(
                &args.fixed_desc,
                &args.fixed_keypoints,
                &args.moving_desc,
                &args.moving_keypoints,
                &args.out,
            )
        }
        Command::Register(args) => {
            if let Some(scale) = &args.scale {
                let (sx, sy) = scale
                    .split_once(',')
                    .ok_or_else(|| anyhow::anyhow!("--scale expects sx,sy"))?;
                cfg.register_scale_x = sx.trim().parse()?;
                cfg.register_scale_y = sy.trim().parse()?;
            }
            cfg.validate()?;
            print!("{}", cfg.echo());
            commands::register(&cfg, args)
        }
        Command::Eval(args) => {
            cfg.validate()?;
            print!("{}", cfg.echo());
            commands::eval(&args.manifest, &args.predictions, &args.out)
        }
        Command::Vtkrs(args) => {
            cfg.validate()?;
            print!("{}", cfg.echo());
            commands::vtkrs_cmd(
                &cfg,
                &args.dataset,
                &args.checkpoint,
                args.oracle_keypoints,
                &args.out,
            )
        }
    }
}
