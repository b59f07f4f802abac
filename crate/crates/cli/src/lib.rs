//! Subcommand dispatch for the `wildreid` binary.
//!
//! Exit codes: 0 success, 1 runtime or configuration failure (config
//! errors name the offending field), 2 usage errors (unknown subcommand,
//! bad flags).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wildreid_core::partviz::DescriptorLayer;
use wildreid_core::trainer::TrainError;

mod commands;
pub mod config;

#[derive(Debug)]
pub enum CliError {
    /// A configuration problem attributable to a named field.
    Config { field: String, reason: String },
    Other(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config { field, reason } => write!(f, "config field `{field}`: {reason}"),
            Self::Other(e) => write!(f, "{e}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig { field, reason } => Self::Config {
                field: format!("train.{field}"),
                reason,
            },
            other => Self::Other(other.into()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "wildreid",
    version,
    about = "Animal re-identification toolkit: mask fusion, training, retrieval evaluation, and correspondence visualization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse candidate segmentation masks against reference masks and blank
    /// image backgrounds
    FuseMasks(FuseMasksArgs),
    /// Train a re-identification model
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest
    Eval(EvalArgs),
    /// Train with original vs masked backgrounds and evaluate the 2x2 grid
    BiasGrid(BiasGridArgs),
    /// Train the loss/sampler build-up grid and tabulate retrieval quality
    Ablate(AblateArgs),
    /// Evaluate an existing checkpoint on another dataset's manifest
    Transfer(TransferArgs),
    /// Query a pixel in one image and visualize its best match in another
    VisualizeMatch(VisualizeMatchArgs),
    /// Check a manifest loads cleanly; optionally check train/test overlap
    ValidateManifest(ValidateManifestArgs),
    /// Generate the bundled synthetic toy dataset
    MakeToy(MakeToyArgs),
}

#[derive(clap::Args, Debug)]
pub struct FuseMasksArgs {
    /// Manifest naming the images to process
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of candidate masks, `<stem>_*.png` per image
    #[arg(long)]
    pub candidates: PathBuf,
    /// Directory of reference masks, `<stem>.png` per image
    #[arg(long)]
    pub reference: PathBuf,
    /// Output directory (masks/ and images/ subdirectories)
    #[arg(long)]
    pub out: PathBuf,
    /// Acceptance criterion: iou, ioc, or passthrough
    #[arg(long, default_value = "iou")]
    pub criterion: String,
    /// Acceptance threshold for iou/ioc
    #[arg(long, default_value_t = 0.3)]
    pub threshold: f64,
    /// Background fill color as R,G,B
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    pub fill: [u8; 3],
    /// Drop candidates smaller than this many pixels
    #[arg(long)]
    pub min_area: Option<usize>,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// Experiment config (TOML); defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest; overrides the config's dataset block
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Run directory for checkpoints, logs, and the resolved config
    #[arg(long)]
    pub out: PathBuf,
    /// Toy preset: small model and schedule; generates the bundled
    /// synthetic dataset when no manifest is given
    #[arg(long)]
    pub toy: bool,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// plain, or atrw for per-camera splits plus their mean
    #[arg(long, default_value = "plain")]
    pub protocol: String,
    /// Apply k-reciprocal re-ranking before ranking
    #[arg(long)]
    pub rerank: bool,
    #[arg(long, default_value_t = 20)]
    pub k1: usize,
    #[arg(long, default_value_t = 6)]
    pub k2: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
    /// Treat each (entity, orientation) as its own identity
    #[arg(long)]
    pub split_sides: bool,
    /// Black out backgrounds using manifest masks before embedding
    #[arg(long)]
    pub use_masks: bool,
    /// Write the text table here and a .json record next to it
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct BiasGridArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub rerank: bool,
    #[arg(long)]
    pub split_sides: bool,
    #[arg(long)]
    pub use_masks: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct VisualizeMatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Query position in source-image pixels, as X,Y
    #[arg(long, value_parser = parse_point)]
    pub point: (u32, u32),
    /// Descriptor layer: dve or stage3-raw
    #[arg(long, value_parser = parse_layer, default_value = "dve")]
    pub layer: DescriptorLayer,
    /// Output panel image (PNG)
    #[arg(long)]
    pub out: PathBuf,
    /// Second checkpoint to render a comparison panel from; inputs must
    /// preprocess identically
    #[arg(long)]
    pub compare_checkpoint: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct ValidateManifestArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// When given, also require train/test entity disjointness
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub train_entities: u32,
    #[arg(long, default_value_t = 8)]
    pub test_entities: u32,
    #[arg(long, default_value_t = 6)]
    pub train_per_side: u32,
    #[arg(long, default_value_t = 3)]
    pub test_per_side: u32,
    #[arg(long, default_value_t = 64)]
    pub image_size: u32,
    #[arg(long, default_value_t = 3)]
    pub cameras: u32,
    /// Color backgrounds per identity (the shortcut the bias grid probes)
    #[arg(long)]
    pub biased_backgrounds: bool,
    /// Also emit candidate/reference masks for the fusion pipeline
    #[arg(long)]
    pub fusion_inputs: bool,
}

fn parse_point(s: &str) -> Result<(u32, u32), String> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| format!("expected X,Y got `{s}`"))?;
    Ok((
        x.trim().parse().map_err(|e| format!("bad X: {e}"))?,
        y.trim().parse().map_err(|e| format!("bad Y: {e}"))?,
    ))
}

fn parse_rgb(s: &str) -> Result<[u8; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected R,G,B got `{s}`"));
    }
    let mut rgb = [0u8; 3];
    for (i, p) in parts.iter().enumerate() {
        rgb[i] = p.trim().parse().map_err(|e| format!("bad channel: {e}"))?;
    }
    Ok(rgb)
}

fn parse_layer(s: &str) -> Result<DescriptorLayer, String> {
    s.parse().map_err(|e: wildreid_core::partviz::VizError| e.to_string())
}

/// Parse and run; the returned code is the process exit status.
pub fn run(argv: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return u8::try_from(code).unwrap_or(2);
        }
    };
    let result = match &cli.command {
        Command::FuseMasks(args) => commands::cmd_fuse_masks(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::BiasGrid(args) => commands::cmd_bias_grid(args),
        Command::Ablate(args) => commands::cmd_ablate(args),
        Command::Transfer(args) => commands::cmd_transfer(args),
        Command::VisualizeMatch(args) => commands::cmd_visualize_match(args),
        Command::ValidateManifest(args) => commands::cmd_validate_manifest(args),
        Command::MakeToy(args) => commands::cmd_make_toy(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn dispatch(argv: &[String]) -> ExitCode {
    ExitCode::from(run(argv))
}
