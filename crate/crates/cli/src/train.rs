//! `train`: fit a network on the train split, keep the best validation
//! checkpoint.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cartnet_core::train::{train, RunConfig};
use clap::Args;
use serde_json::json;

use crate::data::{build_graphs, load_dataset, load_splits, select, write_text};
use crate::model::load_run_config;
use crate::Paths;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Split file from `cartnet split`.
    #[arg(long)]
    splits: PathBuf,
    /// Run configuration (TOML with `[model]` and `[train]` tables).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint; history goes next to it as `.history.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Drop hydrogen atoms from the graphs entirely.
    #[arg(long)]
    no_hydrogens: bool,
}

pub fn run(args: &TrainArgs, paths: &Paths) -> Result<ExitCode> {
    let cfg = match &args.config {
        Some(p) => load_run_config(&paths.resolve(p))?,
        None => RunConfig::default(),
    };
    let all = load_dataset(&paths.resolve(&args.data))?;
    let splits = load_splits(&paths.resolve(&args.splits))?;
    let include_h = !args.no_hydrogens;
    let train_graphs = build_graphs(&select(&all, &splits.train)?, cfg.model.cutoff, include_h)?;
    let val_graphs = build_graphs(&select(&all, &splits.val)?, cfg.model.cutoff, include_h)?;
    println!(
        "training on {} structures, validating on {}",
        train_graphs.len(),
        val_graphs.len()
    );

    let out =
        train(&train_graphs, &val_graphs, &cfg.model, &cfg.train).context("training failed")?;
    let mut ck = out.best.to_checkpoint();
    ck.metadata["include_hydrogens"] = json!(include_h);
    ck.metadata["best_epoch"] = json!(out.best_epoch);
    ck.metadata["best_val_mae"] = json!(out.best_val_mae);
    ck.metadata["train"] = serde_json::to_value(&cfg.train)?;
    let ckpt_path = paths.resolve(&args.out);
    write_text(&ckpt_path, &ck.to_json()?)?;
    let history_path = ckpt_path.with_extension("history.csv");
    write_text(&history_path, &out.history.to_csv())?;

    let last = out.history.epochs.last();
    println!(
        "{} epochs, {} steps, final train loss {}, best val MAE {} (epoch {})",
        out.history.epochs.len(),
        out.history.step_losses.len(),
        last.map(|e| format!("{:.4e}", e.train_loss))
            .unwrap_or_default(),
        out.best_val_mae
            .map(|v| format!("{v:.4e}"))
            .unwrap_or_else(|| "n/a".into()),
        out.best_epoch
    );
    println!(
        "wrote {} and {}",
        ckpt_path.display(),
        history_path.display()
    );
    Ok(ExitCode::SUCCESS)
}
