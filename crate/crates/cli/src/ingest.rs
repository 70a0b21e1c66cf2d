//! `ingest`: CIF directory to curated JSON-lines dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cartnet_core::cif::{curate, load_cif, write_dataset_tagged, Curation, CurationCriteria};
use cartnet_core::CrystalStructure;
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::write_text;
use crate::Paths;

/// Exit code when some files could not be parsed; the dataset is still written.
pub const PARTIAL_FAILURE: u8 = 2;

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory scanned (non-recursively) for `*.cif` files.
    #[arg(long)]
    cif_dir: PathBuf,
    /// Output dataset (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Keep rejected structures, tagged with their reason.
    #[arg(long)]
    no_curate: bool,
    /// Curation thresholds (TOML).
    #[arg(long)]
    criteria: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    files: usize,
    failed_files: Vec<String>,
    structures: usize,
    accepted: usize,
    rejected: BTreeMap<String, usize>,
    written: usize,
}

fn cif_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("cif")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_criteria(path: Option<&Path>) -> Result<CurationCriteria> {
    match path {
        None => Ok(CurationCriteria::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading criteria {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing criteria {}", p.display()))
        }
    }
}

pub fn run(args: &IngestArgs, paths: &Paths) -> Result<ExitCode> {
    let criteria = load_criteria(
        args.criteria
            .as_deref()
            .map(|p| paths.resolve(p))
            .as_deref(),
    )?;
    let files = cif_files(&paths.resolve(&args.cif_dir))?;
    let parsed: Vec<(PathBuf, Result<Vec<CrystalStructure>, String>)> = files
        .par_iter()
        .map(|f| {
            let r = std::fs::read_to_string(f)
                .map_err(|e| e.to_string())
                .and_then(|t| load_cif(&t).map_err(|e| e.to_string()));
            (f.clone(), r)
        })
        .collect();

    let mut summary = IngestSummary {
        files: files.len(),
        failed_files: Vec::new(),
        structures: 0,
        accepted: 0,
        rejected: BTreeMap::new(),
        written: 0,
    };
    let mut kept: Vec<(CrystalStructure, Option<String>)> = Vec::new();
    for (file, result) in parsed {
        let structures = match result {
            Ok(s) => s,
            Err(e) => {
                eprintln!("{}: {e}", file.display());
                summary.failed_files.push(file.display().to_string());
                continue;
            }
        };
        for s in structures {
            summary.structures += 1;
            match curate(&s, &criteria) {
                Curation::Accept => {
                    summary.accepted += 1;
                    kept.push((s, None));
                }
                Curation::Reject(r) => {
                    *summary.rejected.entry(r.code.to_string()).or_default() += 1;
                    log::info!("{}: rejected ({r})", s.id);
                    if args.no_curate {
                        kept.push((s, Some(r.to_string())));
                    }
                }
            }
        }
    }
    summary.written = kept.len();
    let out = paths.resolve(&args.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tagged: Vec<(&CrystalStructure, Option<String>)> =
        kept.iter().map(|(s, t)| (s, t.clone())).collect();
    write_dataset_tagged(&tagged, &out).with_context(|| format!("writing {}", out.display()))?;
    write_text(
        &out.with_extension("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;

    println!(
        "{} files, {} structures, {} accepted",
        summary.files, summary.structures, summary.accepted
    );
    for (code, n) in &summary.rejected {
        println!("  rejected {code}: {n}");
    }
    println!("wrote {} structures to {}", summary.written, out.display());
    if summary.failed_files.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("{} file(s) could not be parsed", summary.failed_files.len());
        Ok(ExitCode::from(PARTIAL_FAILURE))
    }
}
