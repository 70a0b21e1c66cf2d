use super::{CartNet, ModelError};
use crate::crystal::{AdpTensor, Mat3};
use crate::graph::CrystalGraph;
use crate::kernels::Mode;

/// Anything that maps a graph to per-node ADP predictions. Nodes without a
/// prediction (hydrogens) yield `None`.
pub trait AdpPredictor: Sync {
    fn predict_adp(&self, graph: &CrystalGraph) -> Result<Vec<Option<AdpTensor>>, ModelError>;
}

impl AdpPredictor for CartNet {
    fn predict_adp(&self, graph: &CrystalGraph) -> Result<Vec<Option<AdpTensor>>, ModelError> {
        let adps = self.predict_adps(&[graph], Mode::Eval)?;
        Ok(adps
            .into_iter()
            .zip(&graph.z)
            .map(|(u, &z)| (z != 1).then_some(u))
            .collect())
    }
}

/// Returns the graph's own targets: a perfect predictor.
#[derive(Debug, Clone, Copy, Default)]
pub struct TargetOracle;

impl AdpPredictor for TargetOracle {
    fn predict_adp(&self, graph: &CrystalGraph) -> Result<Vec<Option<AdpTensor>>, ModelError> {
        Ok(graph.targets.clone())
    }
}

/// Exactly rotation-equivariant predictor built from the edge directions,
/// `U_i = ε·I + Σ_j w(d_ij)·v̂v̂ᵀ`. Rotating every `v_hat` by `R` maps each
/// output to `R·U·Rᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct EquivariantStub {
    pub epsilon: f64,
    pub scale: f64,
}

impl Default for EquivariantStub {
    fn default() -> Self {
        Self {
            epsilon: 0.005,
            scale: 0.01,
        }
    }
}

impl AdpPredictor for EquivariantStub {
    fn predict_adp(&self, graph: &CrystalGraph) -> Result<Vec<Option<AdpTensor>>, ModelError> {
        let mut acc = vec![Mat3::identity() * self.epsilon; graph.n_nodes];
        for e in &graph.edges {
            let w = self.scale * (-e.d).exp();
            acc[e.dst] += e.v_hat * e.v_hat.transpose() * w;
        }
        Ok(acc
            .into_iter()
            .zip(&graph.z)
            .map(|(u, &z)| (z != 1).then(|| AdpTensor((u + u.transpose()) * 0.5)))
            .collect())
    }
}
