//! `predict` and `plot-ellipsoids`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cartnet_core::cif::load_cif;
use cartnet_core::crystal::{ellipsoid_volume, probability_scale, ORTEP_PROBABILITY};
use cartnet_core::elements;
use cartnet_core::graph::{build_graph_with, GraphOptions};
use cartnet_core::metrics::{adp_iou, IOU_GRID};
use cartnet_core::{AdpTensor, CrystalGraph, CrystalStructure};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::data::write_text;
use crate::{model, CheckpointArgs, Paths};

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    /// Input CIF; every data block is predicted.
    #[arg(long)]
    cif: PathBuf,
    /// Override the measurement temperature in K.
    #[arg(long)]
    temperature: Option<f64>,
    /// Also write the predictions as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long)]
    cif: PathBuf,
    /// Output directory for `ellipsoids.json` and `ellipsoids.obj`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    temperature: Option<f64>,
    /// Annotate each atom with the IoU against the CIF's own ADPs.
    #[arg(long)]
    against_experimental: bool,
    /// Mesh resolution (latitude bands; longitude uses twice as many).
    #[arg(long, default_value_t = 12)]
    mesh_bands: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AtomPrediction {
    pub structure_id: String,
    pub atom_index: usize,
    pub site_index: usize,
    pub element: String,
    /// U11, U22, U33, U12, U13, U23 in Å².
    pub u: [f64; 6],
    /// Volume of the 50% probability ellipsoid in Å³.
    pub volume: f64,
}

/// One atom's ellipsoid.
#[derive(Debug, Serialize, Deserialize)]
pub struct EllipsoidRecord {
    pub structure_id: String,
    pub atom_index: usize,
    pub element: String,
    /// Cartesian centre in Å.
    pub center: [f64; 3],
    pub u: [f64; 6],
    /// Descending eigenvalues of U in Å².
    pub eigenvalues: [f64; 3],
    /// Unit eigenvectors matching `eigenvalues`.
    pub eigenvectors: [[f64; 3]; 3],
    /// Probability enclosed by the surface and its Mahalanobis radius.
    pub probability: f64,
    pub scale: f64,
    /// Semi-axes `scale·√λ` in Å.
    pub radii: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experimental_u: Option<[f64; 6]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

struct Predicted {
    structure: CrystalStructure,
    graph: CrystalGraph,
    adps: Vec<Option<AdpTensor>>,
}

fn predict_cif(
    loaded: &model::Loaded,
    cif: &Path,
    temperature: Option<f64>,
) -> Result<Vec<Predicted>> {
    let text =
        std::fs::read_to_string(cif).with_context(|| format!("reading {}", cif.display()))?;
    let structures = load_cif(&text).with_context(|| format!("parsing {}", cif.display()))?;
    if structures.is_empty() {
        bail!("{} contains no structures", cif.display());
    }
    let opts = GraphOptions {
        include_hydrogens: loaded.include_hydrogens,
        parallel: true,
    };
    structures
        .into_iter()
        .map(|mut s| {
            if let Some(t) = temperature {
                s.temperature = Some(t);
            }
            let graph = build_graph_with(&s, loaded.cutoff(), &opts)
                .with_context(|| format!("building graph for `{}`", s.id))?;
            let adps = loaded
                .predictor()
                .predict_adp(&graph)
                .with_context(|| format!("predicting `{}`", s.id))?;
            Ok(Predicted {
                structure: s,
                graph,
                adps,
            })
        })
        .collect()
}

fn symbol(z: u8) -> String {
    elements::symbol(z).unwrap_or("X").to_string()
}

fn load(args: &CheckpointArgs, paths: &Paths) -> Result<model::Loaded> {
    model::load(
        &paths.resolve(&args.ckpt),
        args.config.as_deref().map(|p| paths.resolve(p)).as_deref(),
    )
}

pub fn run_predict(args: &PredictArgs, paths: &Paths) -> Result<ExitCode> {
    let loaded = load(&args.ckpt, paths)?;
    let mut rows = Vec::new();
    for p in predict_cif(&loaded, &paths.resolve(&args.cif), args.temperature)? {
        println!(
            "{} (T = {}):",
            p.structure.id,
            p.structure
                .temperature
                .map(|t| format!("{t} K"))
                .unwrap_or_else(|| "n/a".into())
        );
        println!(
            "  {:>4} {:>3} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "atom", "el", "U11", "U22", "U33", "U12", "U13", "U23", "vol"
        );
        for (i, u) in p.adps.iter().enumerate() {
            let Some(u) = u else { continue };
            let row = AtomPrediction {
                structure_id: p.structure.id.clone(),
                atom_index: i,
                site_index: p.graph.site_index[i],
                element: symbol(p.graph.z[i]),
                u: u.unique(),
                volume: ellipsoid_volume(u, ORTEP_PROBABILITY)?,
            };
            let v = row.u;
            println!(
                "  {:>4} {:>3} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
                i, row.element, v[0], v[1], v[2], v[3], v[4], v[5], row.volume
            );
            rows.push(row);
        }
    }
    if let Some(out) = &args.out {
        let path = paths.resolve(out);
        write_text(&path, &serde_json::to_string_pretty(&rows)?)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ellipsoid_record(
    structure_id: &str,
    atom_index: usize,
    element: String,
    center: [f64; 3],
    u: &AdpTensor,
    experimental: Option<&AdpTensor>,
) -> Result<EllipsoidRecord> {
    let (values, vectors) = u.eigendecompose();
    if !(values[2] > 0.0) {
        bail!("atom {atom_index} of `{structure_id}` has a non-positive-definite tensor");
    }
    let scale = probability_scale(ORTEP_PROBABILITY)?;
    let iou = experimental.map(|e| adp_iou(u, e, IOU_GRID)).transpose()?;
    Ok(EllipsoidRecord {
        structure_id: structure_id.to_string(),
        atom_index,
        element,
        center,
        u: u.unique(),
        eigenvalues: [values[0], values[1], values[2]],
        eigenvectors: std::array::from_fn(|k| [vectors[(0, k)], vectors[(1, k)], vectors[(2, k)]]),
        probability: ORTEP_PROBABILITY,
        scale,
        radii: std::array::from_fn(|k| scale * values[k].sqrt()),
        experimental_u: experimental.map(AdpTensor::unique),
        iou,
    })
}

/// Appends a UV-sphere mesh of the ellipsoid to an OBJ document.
pub fn append_mesh(
    obj: &mut String,
    rec: &EllipsoidRecord,
    bands: usize,
    vertex_offset: &mut usize,
) {
    let bands = bands.max(3);
    let sectors = 2 * bands;
    let _ = writeln!(
        obj,
        "o {}_{}{}",
        rec.structure_id, rec.element, rec.atom_index
    );
    let point = |theta: f64, phi: f64| {
        let s = [
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        ];
        let mut p = rec.center;
        for (k, v) in rec.eigenvectors.iter().enumerate() {
            for (a, pa) in p.iter_mut().enumerate() {
                *pa += v[a] * rec.radii[k] * s[k];
            }
        }
        p
    };
    let pi = std::f64::consts::PI;
    // poles plus (bands - 1) rings
    let mut verts = vec![point(0.0, 0.0)];
    for b in 1..bands {
        let theta = pi * b as f64 / bands as f64;
        for s in 0..sectors {
            verts.push(point(theta, 2.0 * pi * s as f64 / sectors as f64));
        }
    }
    verts.push(point(pi, 0.0));
    for v in &verts {
        let _ = writeln!(obj, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    let base = *vertex_offset + 1;
    let ring = |b: usize, s: usize| base + 1 + (b - 1) * sectors + (s % sectors);
    let south = base + verts.len() - 1;
    for s in 0..sectors {
        let _ = writeln!(obj, "f {} {} {}", base, ring(1, s), ring(1, s + 1));
        let _ = writeln!(
            obj,
            "f {} {} {}",
            south,
            ring(bands - 1, s + 1),
            ring(bands - 1, s)
        );
    }
    for b in 1..bands - 1 {
        for s in 0..sectors {
            let _ = writeln!(
                obj,
                "f {} {} {} {}",
                ring(b, s),
                ring(b + 1, s),
                ring(b + 1, s + 1),
                ring(b, s + 1)
            );
        }
    }
    *vertex_offset += verts.len();
}

pub fn run_plot(args: &PlotArgs, paths: &Paths) -> Result<ExitCode> {
    let loaded = load(&args.ckpt, paths)?;
    let mut records = Vec::new();
    for p in predict_cif(&loaded, &paths.resolve(&args.cif), args.temperature)? {
        for (i, u) in p.adps.iter().enumerate() {
            let Some(u) = u else { continue };
            let experimental = if args.against_experimental {
                match p.graph.targets[i] {
                    Some(e) => Some(e),
                    None => bail!(
                        "MissingAdp: atom {i} of `{}` has no experimental ADP to compare against",
                        p.structure.id
                    ),
                }
            } else {
                None
            };
            let site = &p.structure.sites[p.graph.site_index[i]];
            let center = [site.cart_pos[0], site.cart_pos[1], site.cart_pos[2]];
            records.push(ellipsoid_record(
                &p.structure.id,
                i,
                symbol(p.graph.z[i]),
                center,
                u,
                experimental.as_ref(),
            )?);
        }
    }
    let dir = paths.resolve(&args.out);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut obj = String::from("# ellipsoid meshes, one object per atom\n");
    let mut offset = 0;
    for r in &records {
        append_mesh(&mut obj, r, args.mesh_bands, &mut offset);
    }
    write_text(
        &dir.join("ellipsoids.json"),
        &serde_json::to_string_pretty(&records)?,
    )?;
    write_text(&dir.join("ellipsoids.obj"), &obj)?;
    for r in &records {
        let iou = r.iou.map(|v| format!(", IoU {v:.2}%")).unwrap_or_default();
        println!(
            "{} {}{}: radii {:.4} {:.4} {:.4} Å{iou}",
            r.structure_id, r.element, r.atom_index, r.radii[0], r.radii[1], r.radii[2]
        );
    }
    println!("wrote {} ellipsoids to {}", records.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}
