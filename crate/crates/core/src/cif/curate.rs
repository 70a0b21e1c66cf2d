//! Quality filters applied to experimental structures before training.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crystal::{ellipsoid_volume, CrystalStructure, ORTEP_PROBABILITY};
use crate::elements;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CurationCriteria {
    /// Largest accepted refinement residual (fraction).
    pub max_r_factor: f64,
    pub require_full_occupancy: bool,
    pub require_temperature: bool,
    pub reject_remarks: bool,
    /// Largest accepted ellipsoid volume in Å³.
    pub max_adp_volume: f64,
    /// Largest accepted `Vol / Vol_cov`.
    pub max_vol_ratio: f64,
    /// Smallest accepted `Vol / Vol_cov` above `high_temperature`.
    pub min_vol_ratio_high_t: f64,
    pub high_temperature: f64,
    /// Eigenvalue ratio `λmax / λmin` limit.
    pub max_eig_ratio: f64,
    /// Reject ratios *below* `max_eig_ratio` instead of above it.
    pub invert_eig_ratio: bool,
    /// Probability surface used for ellipsoid volumes.
    pub probability: f64,
    /// Per-element covalent radius overrides in Å, keyed by symbol.
    pub covalent_radii: BTreeMap<String, f64>,
}

impl Default for CurationCriteria {
    fn default() -> Self {
        Self {
            max_r_factor: 0.05,
            require_full_occupancy: true,
            require_temperature: true,
            reject_remarks: true,
            max_adp_volume: 1.25,
            max_vol_ratio: 0.35,
            min_vol_ratio_high_t: 1e-4,
            high_temperature: 150.0,
            max_eig_ratio: 8.0,
            invert_eig_ratio: false,
            probability: ORTEP_PROBABILITY,
            covalent_radii: BTreeMap::new(),
        }
    }
}

impl CurationCriteria {
    pub fn covalent_radius(&self, z: u8) -> Option<f64> {
        elements::symbol(z)
            .and_then(|s| self.covalent_radii.get(s).copied())
            .or_else(|| elements::covalent_radius(z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectCode {
    RFactor,
    Occupancy,
    MissingTemperature,
    Remarks,
    MissingAdp,
    NonPositiveAdp,
    AdpTooLarge,
    VolRatioHigh,
    VolRatioLowHighT,
    EigRatio,
    Polymeric,
    Disorder,
}

impl RejectCode {
    pub const ALL: [RejectCode; 12] = [
        RejectCode::RFactor,
        RejectCode::Occupancy,
        RejectCode::MissingTemperature,
        RejectCode::Remarks,
        RejectCode::MissingAdp,
        RejectCode::NonPositiveAdp,
        RejectCode::AdpTooLarge,
        RejectCode::VolRatioHigh,
        RejectCode::VolRatioLowHighT,
        RejectCode::EigRatio,
        RejectCode::Polymeric,
        RejectCode::Disorder,
    ];
}

impl fmt::Display for RejectCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectReason {
    pub code: RejectCode,
    pub detail: String,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Curation {
    Accept,
    Reject(RejectReason),
}

impl Curation {
    pub fn is_accept(&self) -> bool {
        matches!(self, Curation::Accept)
    }

    pub fn code(&self) -> Option<RejectCode> {
        match self {
            Curation::Accept => None,
            Curation::Reject(r) => Some(r.code),
        }
    }
}

/// Chemistry-aware filter (polymeric networks, multiple molecule types,
/// disorder). Runs after the built-in checks.
pub trait ChemistryFilter: Send + Sync {
    fn check(&self, structure: &CrystalStructure) -> Option<RejectReason>;
}

fn reject(code: RejectCode, detail: impl Into<String>) -> Curation {
    Curation::Reject(RejectReason {
        code,
        detail: detail.into(),
    })
}

/// Runs the built-in filter chain and reports the first failing filter.
pub fn curate(structure: &CrystalStructure, criteria: &CurationCriteria) -> Curation {
    curate_with(structure, criteria, &[])
}

pub fn curate_with(
    structure: &CrystalStructure,
    criteria: &CurationCriteria,
    filters: &[&dyn ChemistryFilter],
) -> Curation {
    use RejectCode::*;

    match structure.r_factor {
        Some(r) if r <= criteria.max_r_factor => {}
        Some(r) => return reject(RFactor, format!("R = {r} > {}", criteria.max_r_factor)),
        None => return reject(RFactor, "no R-factor reported"),
    }
    if criteria.require_full_occupancy {
        if let Some((i, s)) = structure
            .sites
            .iter()
            .enumerate()
            .find(|(_, s)| s.occupancy != 1.0)
        {
            return reject(Occupancy, format!("site {i} occupancy {}", s.occupancy));
        }
    }
    if criteria.require_temperature && structure.temperature.is_none() {
        return reject(MissingTemperature, "no measurement temperature");
    }
    if criteria.reject_remarks && structure.has_remarks {
        return reject(Remarks, "structure carries remarks");
    }

    let heavy: Vec<(usize, &crate::crystal::AtomSite)> = structure
        .sites
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_hydrogen())
        .collect();
    if let Some((i, _)) = heavy.iter().find(|(_, s)| s.adp.is_none()) {
        return reject(MissingAdp, format!("non-hydrogen site {i} has no ADP"));
    }
    let mut eigen = Vec::with_capacity(heavy.len());
    for &(i, s) in &heavy {
        let (vals, _) = s.adp.unwrap().eigendecompose();
        if !(vals[2] > 0.0) {
            return reject(NonPositiveAdp, format!("site {i} eigenvalue {:e}", vals[2]));
        }
        eigen.push((i, s, vals));
    }
    for &(i, _, vals) in &eigen {
        let ratio = vals[0] / vals[2];
        let bad = if criteria.invert_eig_ratio {
            ratio < criteria.max_eig_ratio
        } else {
            ratio > criteria.max_eig_ratio
        };
        if bad {
            return reject(EigRatio, format!("site {i} eigenvalue ratio {ratio:.3}"));
        }
    }
    let mut volumes = Vec::with_capacity(eigen.len());
    for &(i, s, _) in &eigen {
        let v = match ellipsoid_volume(&s.adp.unwrap(), criteria.probability) {
            Ok(v) => v,
            Err(e) => return reject(NonPositiveAdp, format!("site {i}: {e}")),
        };
        if v > criteria.max_adp_volume {
            return reject(AdpTooLarge, format!("site {i} volume {v:.4} Å³"));
        }
        volumes.push((i, s, v));
    }
    let ratios: Vec<(usize, f64)> = volumes
        .iter()
        .map(|&(i, s, v)| {
            let r = criteria
                .covalent_radius(s.atomic_number)
                .unwrap_or(f64::NAN);
            (i, v / (4.0 / 3.0 * std::f64::consts::PI * r.powi(3)))
        })
        .collect();
    if let Some(&(i, q)) = ratios.iter().find(|(_, q)| !(*q <= criteria.max_vol_ratio)) {
        return reject(VolRatioHigh, format!("site {i} Vol/Vol_cov {q:.4}"));
    }
    if structure
        .temperature
        .is_some_and(|t| t > criteria.high_temperature)
    {
        if let Some(&(i, q)) = ratios
            .iter()
            .find(|(_, q)| *q < criteria.min_vol_ratio_high_t)
        {
            return reject(VolRatioLowHighT, format!("site {i} Vol/Vol_cov {q:e}"));
        }
    }
    for f in filters {
        if let Some(r) = f.check(structure) {
            return Curation::Reject(r);
        }
    }
    Curation::Accept
}
