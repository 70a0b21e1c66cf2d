//! Grouped train/validation/test splits.
//!
//! Entries of the same compound (for example the same crystal measured at
//! several temperatures) share a group key and always land in one split.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CifError;
use crate::crystal::{gcd, CrystalStructure};
use crate::elements;
use crate::graph::{build_graph_with, GraphOptions};

pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.78, 0.107, 0.113);

/// Slack added to the sum of covalent radii when perceiving bonds.
const BOND_TOLERANCE: f64 = 0.4;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids of a named split: `train`, `val` or `test`.
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" | "valid" | "validation" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Canonical compound key: reduced formula plus a histogram of perceived
/// bond types, both reduced by their common divisor so that different
/// cell choices of one compound agree.
pub fn group_key(structure: &CrystalStructure) -> String {
    let formula = structure.reduced_formula();
    let max_r = structure
        .sites
        .iter()
        .filter_map(|s| elements::covalent_radius(s.atomic_number))
        .fold(0.0_f64, f64::max);
    let cutoff = 2.0 * max_r + BOND_TOLERANCE;
    let opts = GraphOptions {
        include_hydrogens: true,
        parallel: false,
    };
    let graph = match build_graph_with(structure, cutoff, &opts) {
        Ok(g) => g,
        Err(_) => return formula,
    };
    let mut bonds: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for e in &graph.edges {
        let (zi, zj) = (graph.z[e.dst], graph.z[e.src]);
        let ri = elements::covalent_radius(zi).unwrap_or(0.0);
        let rj = elements::covalent_radius(zj).unwrap_or(0.0);
        if e.d < ri + rj + BOND_TOLERANCE {
            let si = elements::symbol(zi).unwrap_or("X");
            let sj = elements::symbol(zj).unwrap_or("X");
            *bonds.entry((si.min(sj), si.max(sj))).or_default() += 1;
        }
    }
    // Every bond was seen from both ends.
    let mut counts = [0usize; 104];
    for s in &structure.sites {
        counts[usize::from(s.atomic_number).min(103)] += 1;
    }
    let g = counts
        .iter()
        .chain(bonds.values().map(|c| c / 2).collect::<Vec<_>>().iter())
        .fold(0, |acc, &c| gcd(acc, c))
        .max(1);
    let hist: Vec<String> = bonds
        .iter()
        .map(|(&(a, b), &c)| format!("{a}-{b}:{}", c / 2 / g))
        .collect();
    format!("{formula}|{}", hist.join(","))
}

/// Splits `(id, key)` pairs by group.
///
/// Groups are ordered by key, shuffled with a seeded ChaCha8 stream and then
/// poured into train, val and test in that order; a split stops receiving
/// groups once it reaches its rounded target size, so each split deviates
/// from its target by less than one group.
pub fn split_by_keys(
    items: &[(String, String)],
    seed: u64,
    fractions: (f64, f64, f64),
) -> Result<DatasetSplit, CifError> {
    if items.is_empty() {
        return Err(CifError::EmptyDataset);
    }
    let (ft, fv, fs) = fractions;
    let fr = [ft, fv, fs];
    if fr.iter().any(|f| !f.is_finite() || *f < 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-6 {
        return Err(CifError::InvalidFractions(fr.to_vec()));
    }
    let mut seen = HashSet::new();
    for (id, _) in items {
        if !seen.insert(id.as_str()) {
            return Err(CifError::DuplicateId(id.clone()));
        }
    }

    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, key) in items {
        groups.entry(key.as_str()).or_default().push(id.as_str());
    }
    let mut groups: Vec<Vec<&str>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let n = items.len() as f64;
    let target_train = (ft * n).round() as usize;
    let target_val = (fv * n).round() as usize;

    let mut split = DatasetSplit::default();
    for group in groups {
        let dest = if split.train.len() < target_train {
            &mut split.train
        } else if split.val.len() < target_val {
            &mut split.val
        } else {
            &mut split.test
        };
        dest.extend(group.into_iter().map(str::to_string));
    }
    Ok(split)
}

pub fn split_dataset(
    structures: &[CrystalStructure],
    seed: u64,
    fractions: (f64, f64, f64),
) -> Result<DatasetSplit, CifError> {
    let items: Vec<(String, String)> = structures
        .iter()
        .map(|s| (s.id.clone(), group_key(s)))
        .collect();
    split_by_keys(&items, seed, fractions)
}
