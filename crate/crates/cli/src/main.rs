//! `cartnet`: ingest CIFs, split, train, predict, evaluate, check rotation
//! consistency and export ellipsoid geometry.

mod data;
mod evaluate;
mod ingest;
mod model;
mod predict;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cartnet",
    version,
    about = "Crystal graph network for anisotropic displacement parameters"
)]
struct Cli {
    /// Base directory for relative input and output paths.
    #[arg(long, global = true, env = "CARTNET_DATA_DIR", default_value = ".")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, expand and curate a directory of CIFs into a JSON-lines dataset.
    Ingest(ingest::IngestArgs),
    /// Grouped train/val/test split of a dataset.
    Split(data::SplitArgs),
    /// Train a network.
    Train(train::TrainArgs),
    /// Predict ADPs for the structures of a CIF.
    Predict(predict::PredictArgs),
    /// Per-atom MAE, S12 and IoU against a dataset.
    Evaluate(evaluate::EvaluateArgs),
    /// Rotation-consistency check over random rotations.
    Rotcheck(evaluate::RotcheckArgs),
    /// Export ellipsoid records (JSON) and meshes (OBJ).
    PlotEllipsoids(predict::PlotArgs),
}

/// Options shared by commands that load a checkpoint.
#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Run configuration to check against the checkpoint (cutoff, dim).
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Resolves relative paths against the data directory.
pub struct Paths {
    base: PathBuf,
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let paths = Paths { base: cli.data_dir };
    let result = match cli.command {
        Command::Ingest(a) => ingest::run(&a, &paths),
        Command::Split(a) => data::run_split(&a, &paths),
        Command::Train(a) => train::run(&a, &paths),
        Command::Predict(a) => predict::run_predict(&a, &paths),
        Command::Evaluate(a) => evaluate::run_evaluate(&a, &paths),
        Command::Rotcheck(a) => evaluate::run_rotcheck(&a, &paths),
        Command::PlotEllipsoids(a) => predict::run_plot(&a, &paths),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
