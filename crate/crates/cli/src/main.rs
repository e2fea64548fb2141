//! `mssp` — synthetic scenes, training, inference and evaluation from one
//! binary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure. Failures print a single JSON line to stderr. Every command is
//! deterministic given identical flags including `--seed`.

mod commands;

use clap::{Parser, Subcommand};
use mssp_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mssp", version, about = "Bitemporal SAR change detection with a multi-scale spatial pooling network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Training options shared by `train` and `xval`. Unset flags fall back to
/// the optional `--config` JSON file, then to the built-in defaults.
#[derive(clap::Args, Clone)]
struct TrainOpts {
    /// Optimizer steps [default: 3000]
    #[arg(long)]
    steps: Option<usize>,
    /// Patches per step [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate [default: 0.005]
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of pixel positions drawn as training centers [default: 0.2]
    #[arg(long)]
    fraction: Option<f64>,
    /// Share of centers drawn from the boundary band [default: 0.5]
    #[arg(long)]
    boundary_share: Option<f64>,
    /// Boundary band half-width in pixels [default: 2]
    #[arg(long)]
    boundary_band: Option<usize>,
    /// Difference-image window (odd) [default: 3]
    #[arg(long)]
    window: Option<usize>,
    /// Branch pooling flavor: avg or max [default: avg]
    #[arg(long)]
    sp_pool: Option<String>,
    /// JSON file with defaults for the flags above; explicit flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speckled scene pair with reference mask
    Synth {
        /// Output directory for im1/im2/reference/manifest
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// Speckle looks (higher = less noise)
        #[arg(long, default_value_t = 4)]
        looks: u32,
        /// Number of changed discs
        #[arg(long, default_value_t = 8)]
        regions: usize,
        #[arg(long, default_value_t = 10.0)]
        radius_min: f64,
        #[arg(long, default_value_t = 18.0)]
        radius_max: f64,
        /// Intensity multiplier inside changed discs
        #[arg(long, default_value_t = 4.0)]
        contrast: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene name recorded in the manifest [default: synth-<seed>]
        #[arg(long)]
        name: Option<String>,
    },
    /// Train a model on one or more scenes
    Train {
        /// Scene manifest(s); repeat the flag to pool scenes
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Output directory for checkpoint, loss log and center masks
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Run a trained model over a whole scene
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for the change map and probability map
        #[arg(long)]
        out: PathBuf,
        /// Tile stride (1..=32)
        #[arg(long, default_value_t = 16)]
        stride: usize,
        /// Difference-image window (odd)
        #[arg(long, default_value_t = 3)]
        window: usize,
        #[arg(long, default_value = "avg")]
        sp_pool: String,
    },
    /// Score a change map against a reference mask (JSON to stdout)
    Eval {
        /// Predicted binary change map (PGM)
        #[arg(long)]
        map: PathBuf,
        /// Reference mask (PGM)
        #[arg(long)]
        reference: PathBuf,
        /// Pixels to exclude, e.g. training centers (PGM)
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Denominator for the missed-alarm rate: changed or unchanged
        #[arg(long, default_value = "changed")]
        pma_denominator: String,
    },
    /// Leave-one-out across scenes: train on all but one, test on it, rotate
    Xval {
        /// Scene manifests (at least two); fold order follows input order
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Output directory for per-fold reports and checkpoints
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inference tile stride
        #[arg(long, default_value_t = 16)]
        stride: usize,
        #[command(flatten)]
        opts: TrainOpts,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn kind_for(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Numerical(_) => "numerical",
        Error::Shape(_) => "shape",
        Error::Domain(_) => "domain",
        Error::Eval(_) => "eval",
        Error::Checkpoint(_) => "checkpoint",
        Error::Pgm(_) => "pgm",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({
                "error": { "kind": kind_for(&err), "message": err.to_string() }
            });
            eprintln!("{line}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
