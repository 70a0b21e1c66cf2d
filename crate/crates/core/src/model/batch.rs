use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::graph::CrystalGraph;
use crate::model::layers::{envelope, rbf_expand};

/// Mean and standard deviation of training temperatures, in K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for TemperatureStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl TemperatureStats {
    /// Population statistics; a zero spread falls back to `std = 1`.
    pub fn from_temperatures(temps: &[f64]) -> Option<Self> {
        if temps.is_empty() {
            return None;
        }
        let n = temps.len() as f64;
        let mean = temps.iter().sum::<f64>() / n;
        let var = temps.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Some(Self {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        })
    }

    pub fn standardize(&self, t: f64) -> f64 {
        (t - self.mean) / self.std
    }
}

/// Several graphs merged into one disjoint graph, with everything the
/// network consumes precomputed.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub n_nodes: usize,
    pub n_graphs: usize,
    /// Zero-based vocabulary row per node.
    pub vocab_index: Vec<usize>,
    /// Standardised temperature per node, `[n, 1]`.
    pub temperature: Array2<f64>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// RBF expansion followed by `v_hat`, `[m, K + 3]`.
    pub edge_features: Array2<f64>,
    /// Envelope weight per edge, `[m, 1]`.
    pub envelope: Array2<f64>,
    pub node_graph: Vec<usize>,
    pub graph_offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(
        graphs: &[&CrystalGraph],
        config: &ModelConfig,
        stats: &TemperatureStats,
    ) -> Result<Self, ModelError> {
        let n_nodes: usize = graphs.iter().map(|g| g.n_nodes).sum();
        let n_edges: usize = graphs.iter().map(|g| g.edges.len()).sum();
        let k = config.rbf_k;
        let mut vocab_index = Vec::with_capacity(n_nodes);
        let mut temperature = Array2::zeros((n_nodes, 1));
        let mut src = Vec::with_capacity(n_edges);
        let mut dst = Vec::with_capacity(n_edges);
        let mut edge_features = Array2::zeros((n_edges, k + 3));
        let mut env = Array2::zeros((n_edges, 1));
        let mut node_graph = Vec::with_capacity(n_nodes);
        let mut graph_offsets = Vec::with_capacity(graphs.len() + 1);

        let mut offset = 0;
        let mut row = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if (g.cutoff - config.cutoff).abs() > 1e-12 {
                return Err(ModelError::CutoffMismatch {
                    graph: g.cutoff,
                    model: config.cutoff,
                });
            }
            let t = if config.use_temperature {
                let t = g
                    .temperature
                    .ok_or_else(|| ModelError::MissingTemperature(g.id.clone()))?;
                stats.standardize(t)
            } else {
                0.0
            };
            graph_offsets.push(offset);
            for (local, &z) in g.z.iter().enumerate() {
                if z == 0 || z as usize > config.n_vocab {
                    return Err(ModelError::UnknownElement(z));
                }
                vocab_index.push(z as usize - 1);
                temperature[(offset + local, 0)] = t;
                node_graph.push(gi);
            }
            for e in &g.edges {
                src.push(offset + e.src);
                dst.push(offset + e.dst);
                for (c, r) in rbf_expand(e.d, k, config.cutoff).into_iter().enumerate() {
                    edge_features[(row, c)] = r;
                }
                for c in 0..3 {
                    edge_features[(row, k + c)] = e.v_hat[c];
                }
                env[(row, 0)] = envelope(e.d, config.cutoff);
                row += 1;
            }
            offset += g.n_nodes;
        }
        graph_offsets.push(offset);
        Ok(Self {
            n_nodes,
            n_graphs: graphs.len(),
            vocab_index,
            temperature,
            src,
            dst,
            edge_features,
            envelope: env,
            node_graph,
            graph_offsets,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }

    pub fn graph_nodes(&self, g: usize) -> std::ops::Range<usize> {
        self.graph_offsets[g]..self.graph_offsets[g + 1]
    }
}
