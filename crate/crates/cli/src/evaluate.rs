//! `evaluate` and `rotcheck`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use cartnet_core::augment::{rotation_consistency, sample_rotations};
use cartnet_core::metrics::{
    evaluate, evaluate_scalar, EvalOptions, MaeVariant, MetricsReport, IOU_GRID,
};
use cartnet_core::model::HeadKind;
use cartnet_core::Rotation;
use clap::Args;

use crate::data::{build_graphs, load_subset, write_text};
use crate::{model, CheckpointArgs, Paths};

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Split file; without it the whole dataset is used.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// IoU voxel grid edge.
    #[arg(long, default_value_t = IOU_GRID)]
    grid: usize,
    /// Average the MAE over the six unique entries instead of all nine.
    #[arg(long)]
    unique_mae: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Report path (JSON); a CSV summary is written next to it.
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
}

#[derive(Debug, Args)]
pub struct RotcheckArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Number of random rotations.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use identity rotations (harness self-test).
    #[arg(long)]
    identity: bool,
    #[arg(long, default_value = "rotcheck.json")]
    report: PathBuf,
}

fn options(d: &DataArgs) -> Result<EvalOptions> {
    if d.grid == 0 {
        bail!("--grid must be positive");
    }
    Ok(EvalOptions {
        grid: d.grid,
        mae: if d.unique_mae {
            MaeVariant::Unique
        } else {
            MaeVariant::Full
        },
        ..Default::default()
    })
}

fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    write_text(path, &report.to_json()?)?;
    write_text(&path.with_extension("csv"), &report.to_csv())?;
    println!("{}", report.summary_line());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run_evaluate(args: &EvaluateArgs, paths: &Paths) -> Result<ExitCode> {
    let loaded = model::load(
        &paths.resolve(&args.ckpt.ckpt),
        args.ckpt
            .config
            .as_deref()
            .map(|p| paths.resolve(p))
            .as_deref(),
    )?;
    let d = &args.data;
    let structures = load_subset(paths, &d.data, d.splits.as_deref(), &d.split)?;
    let graphs = build_graphs(&structures, loaded.cutoff(), loaded.include_hydrogens)?;
    let report = match loaded.net() {
        Some(net) if net.config.head == HeadKind::ScalarMean => evaluate_scalar(net, &graphs)?,
        _ => evaluate(loaded.predictor(), &graphs, &options(d)?)?,
    };
    write_report(&report, &paths.resolve(&args.report))?;
    Ok(ExitCode::SUCCESS)
}

pub fn run_rotcheck(args: &RotcheckArgs, paths: &Paths) -> Result<ExitCode> {
    let loaded = model::load(
        &paths.resolve(&args.ckpt.ckpt),
        args.ckpt
            .config
            .as_deref()
            .map(|p| paths.resolve(p))
            .as_deref(),
    )?;
    let d = &args.data;
    let structures = load_subset(paths, &d.data, d.splits.as_deref(), &d.split)?;
    let graphs = build_graphs(&structures, loaded.cutoff(), loaded.include_hydrogens)?;
    let rotations = if args.identity {
        vec![Rotation::identity(); args.n]
    } else {
        sample_rotations(args.n, args.seed)
    };
    let report = rotation_consistency(loaded.predictor(), &graphs, &rotations, &options(d)?)?;
    write_report(&report, &paths.resolve(&args.report))?;
    Ok(ExitCode::SUCCESS)
}
