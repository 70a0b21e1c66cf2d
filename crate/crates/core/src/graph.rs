//! Radius graphs under periodic boundary conditions.
//!
//! Every atom `i` receives one directed edge from each periodic image of
//! every atom `j` (including its own images) lying within the cutoff. The
//! edge direction is `v_hat = (p_j - p_i) / d` with `i` the receiver.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::crystal::{AdpTensor, CrystalError, CrystalStructure, LatticeCell, Vec3};

/// Cutoff used throughout the model, in Å.
pub const DEFAULT_CUTOFF: f64 = 5.0;

/// Pairs closer than this are treated as duplicates, not neighbours.
pub const MIN_DISTANCE: f64 = 1e-8;

/// Slack on the inclusive cutoff comparison.
pub const CUTOFF_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error("structure `{0}` has no atoms")]
    NoAtoms(String),
    #[error("invalid cutoff radius {0}")]
    InvalidCutoff(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Sender `j`.
    pub src: usize,
    /// Receiver `i`.
    pub dst: usize,
    pub d: f64,
    pub v_hat: Vec3,
    /// Lattice translation applied to the sender.
    pub image: [i32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrystalGraph {
    pub id: String,
    pub n_nodes: usize,
    pub z: Vec<u8>,
    pub temperature: Option<f64>,
    pub cutoff: f64,
    pub edges: Vec<Edge>,
    /// Non-hydrogen nodes that carry an ADP.
    pub node_has_target: Vec<bool>,
    pub targets: Vec<Option<AdpTensor>>,
    pub scalar_target: Option<f64>,
    /// Index of each node in the source structure's site list.
    pub site_index: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphOptions {
    /// Keep hydrogens as nodes. Disabling removes them from the graph.
    pub include_hydrogens: bool,
    /// Parallelise the neighbour search over receivers.
    pub parallel: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            include_hydrogens: true,
            parallel: true,
        }
    }
}

impl CrystalGraph {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_targets(&self) -> usize {
        self.node_has_target.iter().filter(|&&t| t).count()
    }

    /// Sorts edges by `(src, dst, d, v_hat)`, the canonical order used for
    /// comparisons.
    pub fn canonicalize(&mut self) {
        self.edges.sort_by(edge_order);
    }

    /// Relabels node `k` as `perm[k]`, permuting all per-node arrays and
    /// rewriting edge endpoints. Edge order is kept.
    pub fn permute_nodes(&self, perm: &[usize]) -> CrystalGraph {
        assert_eq!(perm.len(), self.n_nodes);
        let mut out = self.clone();
        for (k, &p) in perm.iter().enumerate() {
            out.z[p] = self.z[k];
            out.node_has_target[p] = self.node_has_target[k];
            out.targets[p] = self.targets[k];
            out.site_index[p] = self.site_index[k];
        }
        for e in &mut out.edges {
            e.src = perm[e.src];
            e.dst = perm[e.dst];
        }
        out
    }
}

fn edge_order(a: &Edge, b: &Edge) -> Ordering {
    a.src
        .cmp(&b.src)
        .then(a.dst.cmp(&b.dst))
        .then(a.d.total_cmp(&b.d))
        .then(a.v_hat[0].total_cmp(&b.v_hat[0]))
        .then(a.v_hat[1].total_cmp(&b.v_hat[1]))
        .then(a.v_hat[2].total_cmp(&b.v_hat[2]))
        .then(a.image.cmp(&b.image))
}

/// Number of cell replicas per axis needed to cover every point within `r_c`
/// of the home cell: `n_i = ceil(r_c / w_i)` with `w_i` the perpendicular
/// width between the faces spanned by the other two cell vectors.
pub fn image_bounds(cell: &LatticeCell, r_c: f64) -> Result<[i32; 3], GraphError> {
    if !(r_c >= 0.0) || !r_c.is_finite() {
        return Err(GraphError::InvalidCutoff(r_c));
    }
    let w = cell.face_widths()?;
    Ok([0, 1, 2].map(|i| (r_c / w[i]).ceil() as i32))
}

pub fn build_graph(structure: &CrystalStructure, r_c: f64) -> Result<CrystalGraph, GraphError> {
    build_graph_with(structure, r_c, &GraphOptions::default())
}

pub fn build_graph_with(
    structure: &CrystalStructure,
    r_c: f64,
    opts: &GraphOptions,
) -> Result<CrystalGraph, GraphError> {
    let mut graph = empty_graph(structure, r_c, opts)?;
    // Pad the bounds so boundary hits admitted by the tolerance are covered.
    let bounds = image_bounds(&structure.cell, r_c + CUTOFF_TOLERANCE)?;
    let frac = wrapped_fractional(structure, &graph.site_index);
    let images = image_list(bounds);
    let cell = &structure.cell;
    let home: Vec<Vec3> = frac.iter().map(|f| cell.frac_to_cart(f)).collect();

    let per_receiver = |i: usize| {
        let mut edges = Vec::new();
        for (j, fj) in frac.iter().enumerate() {
            for k in &images {
                if let Some(e) = make_edge(cell, &home[i], fj, i, j, *k, r_c) {
                    edges.push(e);
                }
            }
        }
        edges
    };
    let edges: Vec<Vec<Edge>> = if opts.parallel {
        (0..graph.n_nodes)
            .into_par_iter()
            .map(per_receiver)
            .collect()
    } else {
        (0..graph.n_nodes).map(per_receiver).collect()
    };
    graph.edges = edges.into_iter().flatten().collect();
    graph.canonicalize();
    Ok(graph)
}

/// Test oracle: plain supercell enumeration with one extra replica per axis.
pub fn brute_force_graph(
    structure: &CrystalStructure,
    r_c: f64,
) -> Result<CrystalGraph, GraphError> {
    let opts = GraphOptions {
        include_hydrogens: true,
        parallel: false,
    };
    let mut graph = empty_graph(structure, r_c, &opts)?;
    let [na, nb, nc] = image_bounds(&structure.cell, r_c + CUTOFF_TOLERANCE)?;
    let frac = wrapped_fractional(structure, &graph.site_index);
    let cell = &structure.cell;
    let mut edges = Vec::new();
    for i in 0..graph.n_nodes {
        let pi = cell.frac_to_cart(&frac[i]);
        for a in -(na + 1)..=(na + 1) {
            for b in -(nb + 1)..=(nb + 1) {
                for c in -(nc + 1)..=(nc + 1) {
                    for (j, fj) in frac.iter().enumerate() {
                        if let Some(e) = make_edge(cell, &pi, fj, i, j, [a, b, c], r_c) {
                            edges.push(e);
                        }
                    }
                }
            }
        }
    }
    graph.edges = edges;
    graph.canonicalize();
    Ok(graph)
}

fn empty_graph(
    structure: &CrystalStructure,
    r_c: f64,
    opts: &GraphOptions,
) -> Result<CrystalGraph, GraphError> {
    if !(r_c >= 0.0) || !r_c.is_finite() {
        return Err(GraphError::InvalidCutoff(r_c));
    }
    let site_index: Vec<usize> = structure
        .sites
        .iter()
        .enumerate()
        .filter(|(_, s)| opts.include_hydrogens || !s.is_hydrogen())
        .map(|(i, _)| i)
        .collect();
    if site_index.is_empty() {
        return Err(GraphError::NoAtoms(structure.id.clone()));
    }
    let sites: Vec<_> = site_index.iter().map(|&i| &structure.sites[i]).collect();
    Ok(CrystalGraph {
        id: structure.id.clone(),
        n_nodes: sites.len(),
        z: sites.iter().map(|s| s.atomic_number).collect(),
        temperature: structure.temperature,
        cutoff: r_c,
        edges: Vec::new(),
        node_has_target: sites
            .iter()
            .map(|s| !s.is_hydrogen() && s.adp.is_some())
            .collect(),
        targets: sites
            .iter()
            .map(|s| if s.is_hydrogen() { None } else { s.adp })
            .collect(),
        scalar_target: structure.target,
        site_index,
    })
}

fn wrapped_fractional(structure: &CrystalStructure, site_index: &[usize]) -> Vec<Vec3> {
    site_index
        .iter()
        .map(|&i| {
            structure.sites[i]
                .frac_pos
                .map(|x| x - x.floor())
                .map(|x| if x >= 1.0 { 0.0 } else { x })
        })
        .collect()
}

fn image_list([na, nb, nc]: [i32; 3]) -> Vec<[i32; 3]> {
    let mut out = Vec::new();
    for a in -na..=na {
        for b in -nb..=nb {
            for c in -nc..=nc {
                out.push([a, b, c]);
            }
        }
    }
    out
}

#[inline]
fn make_edge(
    cell: &LatticeCell,
    pi: &Vec3,
    fj: &Vec3,
    i: usize,
    j: usize,
    k: [i32; 3],
    r_c: f64,
) -> Option<Edge> {
    let shifted = fj + Vec3::new(f64::from(k[0]), f64::from(k[1]), f64::from(k[2]));
    let delta = cell.frac_to_cart(&shifted) - pi;
    let d = delta.norm();
    (d > MIN_DISTANCE && d <= r_c + CUTOFF_TOLERANCE).then(|| Edge {
        src: j,
        dst: i,
        d,
        v_hat: delta / d,
        image: k,
    })
}

/// Histogram of edge lengths over `[0, r_c]` in `bins` equal bins.
pub fn edge_distance_histogram<'a>(
    graphs: impl IntoIterator<Item = &'a CrystalGraph>,
    r_c: f64,
    bins: usize,
) -> Vec<usize> {
    let mut hist = vec![0usize; bins];
    if bins == 0 || r_c <= 0.0 {
        return hist;
    }
    for g in graphs {
        for e in &g.edges {
            let b = ((e.d / r_c) * bins as f64).floor() as usize;
            hist[b.min(bins - 1)] += 1;
        }
    }
    hist
}
