//! Dataset loading, split selection and graph construction.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cartnet_core::cif::{read_dataset, split_dataset, DatasetSplit, DEFAULT_FRACTIONS};
use cartnet_core::graph::{build_graph_with, GraphOptions};
use cartnet_core::{CrystalGraph, CrystalStructure};
use clap::Args;
use rayon::prelude::*;

use crate::Paths;

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Output split file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

pub fn load_dataset(path: &Path) -> Result<Vec<CrystalStructure>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

pub fn load_splits(path: &Path) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading splits {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing splits {}", path.display()))
}

/// Structures whose ids are listed, in list order.
pub fn select(structures: &[CrystalStructure], ids: &[String]) -> Result<Vec<CrystalStructure>> {
    let by_id: std::collections::BTreeMap<&str, &CrystalStructure> =
        structures.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .with_context(|| format!("split lists unknown id `{id}`"))
        })
        .collect()
}

/// Loads a dataset, optionally restricted to one named split.
pub fn load_subset(
    paths: &Paths,
    data: &Path,
    splits: Option<&Path>,
    split: &str,
) -> Result<Vec<CrystalStructure>> {
    let all = load_dataset(&paths.resolve(data))?;
    match splits {
        None => Ok(all),
        Some(p) => {
            let s = load_splits(&paths.resolve(p))?;
            let Some(ids) = s.get(split) else {
                bail!("unknown split `{split}` (expected train, val or test)")
            };
            select(&all, ids)
        }
    }
}

pub fn build_graphs(
    structures: &[CrystalStructure],
    cutoff: f64,
    include_hydrogens: bool,
) -> Result<Vec<CrystalGraph>> {
    let opts = GraphOptions {
        include_hydrogens,
        parallel: false,
    };
    structures
        .par_iter()
        .map(|s| {
            build_graph_with(s, cutoff, &opts)
                .with_context(|| format!("building graph for `{}`", s.id))
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run_split(args: &SplitArgs, paths: &Paths) -> Result<ExitCode> {
    let structures = load_dataset(&paths.resolve(&args.data))?;
    let fractions = match args.fractions.as_deref() {
        None => DEFAULT_FRACTIONS,
        Some(&[a, b, c]) => (a, b, c),
        Some(f) => bail!("--fractions needs three values, got {}", f.len()),
    };
    let split = split_dataset(&structures, args.seed, fractions)?;
    let out = paths.resolve(&args.out);
    write_text(&out, &serde_json::to_string_pretty(&split)?)?;
    println!(
        "split {} structures: train {}, val {}, test {} -> {}",
        split.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}
