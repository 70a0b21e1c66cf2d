//! JSON-lines dataset files, one structure per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CifError;
use crate::crystal::{AdpTensor, AtomSite, CrystalStructure, LatticeCell, Vec3};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellRecord {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SiteRecord {
    pub z: u8,
    pub frac: [f64; 3],
    pub occ: f64,
    /// `u11, u22, u33, u12, u13, u23` in Å², Cartesian axes.
    pub u_cart: Option<[f64; 6]>,
}

/// Serialized form of a [`CrystalStructure`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StructureRecord {
    pub id: String,
    pub cell: CellRecord,
    #[serde(rename = "temperature_K")]
    pub temperature_k: Option<f64>,
    pub r_factor: Option<f64>,
    pub target: Option<f64>,
    pub sites: Vec<SiteRecord>,
    /// Curation verdict, only written for uncurated dumps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject: Option<String>,
}

impl From<&CrystalStructure> for StructureRecord {
    fn from(s: &CrystalStructure) -> Self {
        Self {
            id: s.id.clone(),
            cell: CellRecord {
                a: s.cell.a,
                b: s.cell.b,
                c: s.cell.c,
                alpha: s.cell.alpha,
                beta: s.cell.beta,
                gamma: s.cell.gamma,
            },
            temperature_k: s.temperature,
            r_factor: s.r_factor,
            target: s.target,
            sites: s
                .sites
                .iter()
                .map(|site| SiteRecord {
                    z: site.atomic_number,
                    frac: [site.frac_pos[0], site.frac_pos[1], site.frac_pos[2]],
                    occ: site.occupancy,
                    u_cart: site.adp.map(|u| u.unique()),
                })
                .collect(),
            reject: None,
        }
    }
}

impl StructureRecord {
    pub fn into_structure(self) -> Result<CrystalStructure, CifError> {
        let c = &self.cell;
        let cell = LatticeCell::new(c.a, c.b, c.c, c.alpha, c.beta, c.gamma)?;
        let sites = self
            .sites
            .iter()
            .map(|r| {
                let mut site = AtomSite::new(&cell, r.z, Vec3::from(r.frac)).with_occupancy(r.occ);
                site.adp = r.u_cart.map(AdpTensor::from_unique);
                site
            })
            .collect();
        Ok(CrystalStructure {
            id: self.id,
            cell,
            sites,
            temperature: self.temperature_k,
            r_factor: self.r_factor,
            has_remarks: false,
            target: self.target,
        })
    }
}

pub fn write_dataset(structures: &[CrystalStructure], path: &Path) -> Result<(), CifError> {
    let tagged: Vec<(&CrystalStructure, Option<String>)> =
        structures.iter().map(|s| (s, None)).collect();
    write_dataset_tagged(&tagged, path)
}

/// Writes structures with an optional rejection tag per line.
pub fn write_dataset_tagged(
    structures: &[(&CrystalStructure, Option<String>)],
    path: &Path,
) -> Result<(), CifError> {
    let mut out = BufWriter::new(File::create(path)?);
    for (s, tag) in structures {
        let mut rec = StructureRecord::from(*s);
        rec.reject = tag.clone();
        let line = serde_json::to_string(&rec).map_err(|e| CifError::Schema {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<CrystalStructure>, CifError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if let Some(s) = parse_line(&line?, i + 1)? {
            out.push(s);
        }
    }
    Ok(out)
}

pub fn read_dataset_str(text: &str) -> Result<Vec<CrystalStructure>, CifError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(s) = parse_line(line, i + 1)? {
            out.push(s);
        }
    }
    Ok(out)
}

fn parse_line(line: &str, lineno: usize) -> Result<Option<CrystalStructure>, CifError> {
    if line.trim().is_empty() {
        return Ok(None);
    }
    let rec: StructureRecord = serde_json::from_str(line).map_err(|e| CifError::Schema {
        line: lineno,
        message: e.to_string(),
    })?;
    rec.into_structure()
        .map(Some)
        .map_err(|e| CifError::Schema {
            line: lineno,
            message: e.to_string(),
        })
}
