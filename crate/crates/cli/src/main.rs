//! Batch pipeline driver: substrate generation, image/graph conversion,
//! layer-pair matching, trajectory evolution, reconstruction, analysis.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 data-format errors,
//! 4 numeric or contract errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Overrides;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "polygrain",
    version,
    about = "Layerwise grain-structure graph pipeline"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for per-layer rasterization.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// RNG seed; overrides the config's rng_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Raster resolution in pixels per micrometer; overrides the config.
    #[arg(long, global = true)]
    resolution: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the initial substrate graph (and its raster).
    Init,
    /// Extract a graph from a grain-index image.
    Extract {
        /// GIDX image to extract.
        #[arg(long)]
        input: PathBuf,
    },
    /// Extract consecutive images and export matched training pairs.
    Match {
        /// GIDX images, bottom layer first.
        #[arg(required = true, num_args = 2..)]
        images: Vec<PathBuf>,
    },
    /// Roll the substrate forward and write the trajectory.
    Evolve,
    /// Rasterize a trajectory into GIDX layers and a GVOL stack.
    Reconstruct {
        /// Trajectory directory produced by evolve.
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Compute quantities of interest (and compare against a reference).
    Analyze {
        /// Trajectory directory produced by evolve.
        #[arg(long)]
        trajectory: PathBuf,
        /// Directory of reference layers (GIDX images or graphs).
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn exit_code_for(error: &anyhow::Error) -> u8 {
    use polygrain_core::Error as E;
    if let Some(core) = error.downcast_ref::<E>() {
        return match core {
            E::Config(_) | E::Input(_) => 2,
            E::Format(_) | E::Json(_) | E::Io(_) | E::Load(_) | E::Shape { .. } | E::Tag { .. } => {
                3
            }
            E::Partition(_) | E::Degeneracy { .. } | E::Namespace(_) | E::Lookup { .. } => 3,
            E::Numeric(_)
            | E::Contract(_)
            | E::DegenerateCollapse(_)
            | E::GuardedFlip { .. }
            | E::Reconstruction { .. }
            | E::Precondition(_) => 4,
        };
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config is required"))?;
    let config = RunConfig::load(&config_path)?;
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        resolution: cli.resolution,
        workers: cli.workers,
    };
    match cli.command {
        Command::Init => commands::cmd_init(&config, &overrides),
        Command::Extract { input } => commands::cmd_extract(&config, &overrides, &input),
        Command::Match { images } => commands::cmd_match(&config, &overrides, &images),
        Command::Evolve => commands::cmd_evolve(&config, &overrides),
        Command::Reconstruct { trajectory } => {
            commands::cmd_reconstruct(&config, &overrides, &trajectory)
        }
        Command::Analyze {
            trajectory,
            reference,
        } => commands::cmd_analyze(&config, &overrides, &trajectory, reference.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}
