//! The network: atom and edge encoders, a stack of gated message-passing
//! layers, and either a Cholesky ADP head or a mean-pooled scalar head.
//!
//! Forward passes are pure (`&self`) and return a cache; gradients flow
//! through [`CartNet::backward`], and batch-norm running statistics are
//! updated explicitly with [`CartNet::update_running`].

mod batch;
pub mod layers;
mod predictor;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::batch::{GraphBatch, TemperatureStats};
pub use self::layers::{cholesky_adp, cholesky_backward, cholesky_factor, envelope, rbf_expand};
pub use self::predictor::{AdpPredictor, EquivariantStub, TargetOracle};

use self::layers::{
    AtomCache, AtomEncoder, CartLayer, EdgeCache, EdgeEncoder, LayerCache, Mlp, MlpCache,
};
use crate::crystal::{AdpTensor, Mat3};
use crate::graph::{CrystalGraph, GraphError};
use crate::kernels::{BatchNorm, Checkpoint, KernelError, Mode, Param, TensorRecord};

pub const CHECKPOINT_KIND: &str = "cartnet";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("atomic number {0} outside the embedding vocabulary")]
    UnknownElement(u8),
    #[error("graph cutoff {graph} Å does not match model cutoff {model} Å")]
    CutoffMismatch { graph: f64, model: f64 },
    #[error("structure `{0}` has no temperature but the model uses it")]
    MissingTemperature(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("graph `{0}` has no atoms")]
    NoAtoms(String),
    #[error("model has a {actual:?} head, {expected:?} required")]
    HeadMismatch {
        expected: HeadKind,
        actual: HeadKind,
    },
    #[error("checkpoint kind `{0}` is not a network checkpoint")]
    CheckpointKind(String),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    CholeskyAdp,
    ScalarMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub rbf_k: usize,
    /// Graph cutoff in Å.
    pub cutoff: f64,
    pub use_temperature: bool,
    pub head: HeadKind,
    pub n_vocab: usize,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            dim: 256,
            rbf_k: 64,
            cutoff: 5.0,
            use_temperature: true,
            head: HeadKind::CholeskyAdp,
            n_vocab: 103,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return bad(format!("dim must be even and at least 2, got {}", self.dim));
        }
        if self.num_layers < 1 {
            return bad("num_layers must be at least 1".into());
        }
        if self.rbf_k < 2 {
            return bad(format!("rbf_k must be at least 2, got {}", self.rbf_k));
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return bad(format!("cutoff must be positive, got {}", self.cutoff));
        }
        if self.n_vocab == 0 {
            return bad("n_vocab must be positive".into());
        }
        Ok(())
    }
}

/// Network output for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// One tensor per node of the batch.
    Adp(Vec<Mat3>),
    /// One value per graph of the batch.
    Scalar(Vec<f64>),
}

/// Loss gradient with respect to a [`Prediction`].
#[derive(Debug, Clone, PartialEq)]
pub enum OutputGrad {
    Adp(Vec<Mat3>),
    Scalar(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    atom: AtomCache,
    edge: EdgeCache,
    layers: Vec<LayerCache>,
    head: MlpCache,
    head_out: Array2<f64>,
    graph_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartNet {
    pub config: ModelConfig,
    pub temperature_stats: TemperatureStats,
    pub atom: AtomEncoder,
    pub edge: EdgeEncoder,
    pub layers: Vec<CartLayer>,
    pub head: Mlp,
}

impl CartNet {
    pub fn new(config: ModelConfig, temperature_stats: TemperatureStats) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dim = config.dim;
        let atom = AtomEncoder::new(dim, config.n_vocab, config.use_temperature, &mut rng);
        let edge = EdgeEncoder::new(dim, config.rbf_k, &mut rng);
        let layers = (0..config.num_layers)
            .map(|i| CartLayer::new(&format!("layers.{i}"), dim, &mut rng))
            .collect();
        let out = match config.head {
            HeadKind::CholeskyAdp => 6,
            HeadKind::ScalarMean => 1,
        };
        let head = Mlp::new("head", dim, dim / 2, out, &mut rng);
        Ok(Self {
            config,
            temperature_stats,
            atom,
            edge,
            layers,
            head,
        })
    }

    pub fn batch(&self, graphs: &[&CrystalGraph]) -> Result<GraphBatch> {
        GraphBatch::new(graphs, &self.config, &self.temperature_stats)
    }

    pub fn forward(&self, batch: &GraphBatch, mode: Mode) -> Result<(Prediction, ForwardCache)> {
        let (mut h, atom) = self.atom.forward(&batch.vocab_index, &batch.temperature)?;
        let (mut e, edge) = self.edge.forward(&batch.edge_features)?;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (h2, e2, cache) =
                layer.forward(&h, &e, &batch.envelope, &batch.src, &batch.dst, mode)?;
            h = h2;
            e = e2;
            layer_caches.push(cache);
        }
        let (o, head) = self.head.forward(&h)?;
        let graph_sizes: Vec<usize> = (0..batch.n_graphs)
            .map(|g| batch.graph_nodes(g).len())
            .collect();
        let prediction = match self.config.head {
            HeadKind::CholeskyAdp => Prediction::Adp(
                o.outer_iter()
                    .map(|row| cholesky_adp(row.as_slice().expect("row-major")))
                    .collect(),
            ),
            HeadKind::ScalarMean => {
                let mut out = Vec::with_capacity(batch.n_graphs);
                for g in 0..batch.n_graphs {
                    let range = batch.graph_nodes(g);
                    if range.is_empty() {
                        return Err(ModelError::NoAtoms(format!("batch graph {g}")));
                    }
                    let n = range.len() as f64;
                    out.push(range.map(|i| o[(i, 0)]).sum::<f64>() / n);
                }
                Prediction::Scalar(out)
            }
        };
        let cache = ForwardCache {
            atom,
            edge,
            layers: layer_caches,
            head,
            head_out: o,
            graph_sizes,
        };
        Ok((prediction, cache))
    }

    /// Accumulates parameter gradients for the given output gradient.
    pub fn backward(
        &mut self,
        batch: &GraphBatch,
        cache: &ForwardCache,
        grad: &OutputGrad,
    ) -> Result<()> {
        let o = &cache.head_out;
        let mut d_o = Array2::zeros(o.raw_dim());
        match (grad, self.config.head) {
            (OutputGrad::Adp(du), HeadKind::CholeskyAdp) => {
                for (i, g) in du.iter().enumerate() {
                    let row = o.row(i);
                    let d = cholesky_backward(row.as_slice().expect("row-major"), g);
                    for (c, v) in d.into_iter().enumerate() {
                        d_o[(i, c)] = v;
                    }
                }
            }
            (OutputGrad::Scalar(ds), HeadKind::ScalarMean) => {
                for (g, &dv) in ds.iter().enumerate() {
                    let n = cache.graph_sizes[g] as f64;
                    for i in batch.graph_nodes(g) {
                        d_o[(i, 0)] = dv / n;
                    }
                }
            }
            (OutputGrad::Adp(_), actual) => {
                return Err(ModelError::HeadMismatch {
                    expected: HeadKind::CholeskyAdp,
                    actual,
                })
            }
            (OutputGrad::Scalar(_), actual) => {
                return Err(ModelError::HeadMismatch {
                    expected: HeadKind::ScalarMean,
                    actual,
                })
            }
        }
        let mut dh = self.head.backward(&cache.head, &d_o);
        let mut de = Array2::zeros((batch.n_edges(), self.config.dim));
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            let (dh2, de2) = layer.backward(lc, &dh, &de, &batch.src, &batch.dst);
            dh = dh2;
            de = de2;
        }
        self.edge.backward(&cache.edge, &de);
        self.atom.backward(&cache.atom, &dh);
        Ok(())
    }

    pub fn update_running(&mut self, cache: &ForwardCache) {
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            layer.update_running(lc);
        }
    }

    /// Per-node ADP predictions for a set of graphs, concatenated.
    pub fn predict_adps(&self, graphs: &[&CrystalGraph], mode: Mode) -> Result<Vec<AdpTensor>> {
        let batch = self.batch(graphs)?;
        match self.forward(&batch, mode)?.0 {
            Prediction::Adp(u) => Ok(u.into_iter().map(AdpTensor).collect()),
            Prediction::Scalar(_) => Err(ModelError::HeadMismatch {
                expected: HeadKind::CholeskyAdp,
                actual: self.config.head,
            }),
        }
    }

    pub fn predict_scalars(&self, graphs: &[&CrystalGraph], mode: Mode) -> Result<Vec<f64>> {
        let batch = self.batch(graphs)?;
        match self.forward(&batch, mode)?.0 {
            Prediction::Scalar(s) => Ok(s),
            Prediction::Adp(_) => Err(ModelError::HeadMismatch {
                expected: HeadKind::ScalarMean,
                actual: self.config.head,
            }),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.atom.params();
        out.extend(self.edge.params());
        for l in &self.layers {
            out.extend(l.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.atom.params_mut();
        out.extend(self.edge.params_mut());
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        self.layers.iter().flat_map(|l| l.batch_norms()).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, config);
        ck.metadata = serde_json::json!({ "temperature_stats": self.temperature_stats });
        ck.push_params(self.params());
        for bn in self.batch_norms() {
            let prefix = bn_prefix(bn);
            let mean = bn
                .running_mean
                .view()
                .insert_axis(ndarray::Axis(0))
                .to_owned();
            let var = bn
                .running_var
                .view()
                .insert_axis(ndarray::Axis(0))
                .to_owned();
            ck.buffers.push(TensorRecord::from_array(
                format!("{prefix}.running_mean"),
                &mean,
            ));
            ck.buffers.push(TensorRecord::from_array(
                format!("{prefix}.running_var"),
                &var,
            ));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(ModelError::CheckpointKind(ck.kind.clone()));
        }
        let config: ModelConfig =
            serde_json::from_value(ck.config.clone()).map_err(KernelError::from)?;
        let stats: TemperatureStats =
            serde_json::from_value(ck.metadata["temperature_stats"].clone())
                .map_err(KernelError::from)?;
        let mut model = CartNet::new(config, stats)?;
        ck.load_params(model.params_mut())?;
        for layer in &mut model.layers {
            for bn in layer.batch_norms_mut() {
                let prefix = bn_prefix(bn);
                let mean = ck.buffer(&format!("{prefix}.running_mean"))?.to_array()?;
                let var = ck.buffer(&format!("{prefix}.running_var"))?.to_array()?;
                if mean.len() != bn.dim() || var.len() != bn.dim() {
                    return Err(KernelError::Checkpoint(format!(
                        "running stats of `{prefix}` have wrong size"
                    ))
                    .into());
                }
                bn.running_mean = mean.row(0).to_owned();
                bn.running_var = var.row(0).to_owned();
            }
        }
        Ok(model)
    }
}

fn bn_prefix(bn: &BatchNorm) -> String {
    bn.gamma.name.trim_end_matches(".gamma").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{AtomSite, CrystalStructure, LatticeCell, Vec3};
    use crate::graph::{build_graph, Edge};
    use crate::kernels::gradcheck::relative_error_with_floor;
    use rand::Rng;

    fn small_config(dim: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            dim,
            rbf_k: 8,
            seed: 3,
            ..Default::default()
        }
    }

    fn toy_graph() -> CrystalGraph {
        let cell = LatticeCell::new(4.2, 4.6, 5.1, 88.0, 95.0, 91.0).unwrap();
        let sites = vec![
            AtomSite::new(&cell, 6, Vec3::new(0.1, 0.2, 0.3)).with_adp(AdpTensor::isotropic(0.02)),
            AtomSite::new(&cell, 8, Vec3::new(0.45, 0.1, 0.6)).with_adp(AdpTensor::isotropic(0.03)),
            AtomSite::new(&cell, 1, Vec3::new(0.7, 0.8, 0.2)),
        ];
        build_graph(
            &CrystalStructure::new("toy", cell, sites).with_temperature(150.0),
            5.0,
        )
        .unwrap()
    }

    fn one_atom_graph() -> CrystalGraph {
        let cell = LatticeCell::cubic(5.0).unwrap();
        let s = CrystalStructure::new(
            "one",
            cell.clone(),
            vec![AtomSite::new(&cell, 6, Vec3::zeros())],
        )
        .with_temperature(100.0);
        build_graph(&s, 5.0).unwrap()
    }

    fn stats() -> TemperatureStats {
        TemperatureStats {
            mean: 120.0,
            std: 40.0,
        }
    }

    #[test]
    fn one_atom_smoke_is_spd() {
        let model = CartNet::new(small_config(8, 2), stats()).unwrap();
        let g = one_atom_graph();
        assert_eq!(g.n_edges(), 6);
        let u = model.predict_adps(&[&g], Mode::Eval).unwrap();
        assert_eq!(u.len(), 1);
        assert!(u[0].is_symmetric() && u[0].is_positive_definite());
    }

    #[test]
    fn config_validation() {
        assert!(CartNet::new(
            ModelConfig {
                dim: 7,
                ..small_config(8, 1)
            },
            stats()
        )
        .is_err());
        assert!(CartNet::new(
            ModelConfig {
                num_layers: 0,
                ..small_config(8, 1)
            },
            stats()
        )
        .is_err());
        assert!(CartNet::new(
            ModelConfig {
                rbf_k: 1,
                ..small_config(8, 1)
            },
            stats()
        )
        .is_err());
        let model = CartNet::new(
            ModelConfig {
                cutoff: 4.0,
                ..small_config(8, 1)
            },
            stats(),
        )
        .unwrap();
        assert!(matches!(
            model.batch(&[&toy_graph()]),
            Err(ModelError::CutoffMismatch { .. })
        ));
    }

    #[test]
    fn missing_temperature_and_unknown_element() {
        let model = CartNet::new(small_config(8, 1), stats()).unwrap();
        let mut g = toy_graph();
        g.temperature = None;
        assert!(matches!(
            model.batch(&[&g]),
            Err(ModelError::MissingTemperature(_))
        ));
        let no_t = CartNet::new(
            ModelConfig {
                use_temperature: false,
                ..small_config(8, 1)
            },
            stats(),
        )
        .unwrap();
        assert!(no_t.batch(&[&g]).is_ok());
        let mut g = toy_graph();
        g.z[0] = 104;
        assert!(matches!(
            model.batch(&[&g]),
            Err(ModelError::UnknownElement(104))
        ));
    }

    #[test]
    fn atom_encoder_zero_params_and_determinism() {
        let mut model = CartNet::new(small_config(8, 1), stats()).unwrap();
        let batch = model.batch(&[&toy_graph()]).unwrap();
        let (h, _) = model
            .atom
            .forward(&batch.vocab_index, &batch.temperature)
            .unwrap();
        assert_eq!(h.dim(), (3, 8));
        let idx = vec![5, 5];
        let t = Array2::from_elem((2, 1), 0.3);
        let (h, _) = model.atom.forward(&idx, &t).unwrap();
        assert_eq!(h.row(0), h.row(1));
        for p in model.atom.params_mut() {
            p.value.fill(0.0);
        }
        let (h, _) = model
            .atom
            .forward(&batch.vocab_index, &batch.temperature)
            .unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_encoder_shape_zero_and_direction() {
        let mut model = CartNet::new(small_config(8, 1), stats()).unwrap();
        let batch = model.batch(&[&toy_graph()]).unwrap();
        let (e, _) = model.edge.forward(&batch.edge_features).unwrap();
        assert_eq!(e.dim(), (batch.n_edges(), 8));
        let mut flipped = batch.edge_features.clone();
        for mut row in flipped.outer_iter_mut() {
            for c in 8..11 {
                row[c] = -row[c];
            }
        }
        let (ef, _) = model.edge.forward(&flipped).unwrap();
        assert!((&e - &ef).iter().any(|v| v.abs() > 1e-6));
        for p in model.edge.params_mut() {
            p.value.fill(0.0);
        }
        let (e, _) = model.edge.forward(&batch.edge_features).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_head_properties() {
        let cfg = ModelConfig {
            head: HeadKind::ScalarMean,
            use_temperature: false,
            ..small_config(8, 1)
        };
        let mut model = CartNet::new(cfg, stats()).unwrap();
        let g = toy_graph();
        let s = model.predict_scalars(&[&g], Mode::Eval).unwrap();
        assert_eq!(s.len(), 1);
        let batch = model.batch(&[&g]).unwrap();
        let (_, cache) = model.forward(&batch, Mode::Eval).unwrap();
        let mean = cache.head_out.column(0).sum() / 3.0;
        assert!((s[0] - mean).abs() < 1e-15);

        // duplicating every node (a doubled supercell) leaves the mean unchanged
        let mut doubled = g.clone();
        doubled.n_nodes *= 2;
        doubled.z.extend(g.z.clone());
        doubled.node_has_target.extend(g.node_has_target.clone());
        doubled.targets.extend(g.targets.clone());
        doubled.site_index.extend(g.site_index.clone());
        let shifted: Vec<Edge> = g
            .edges
            .iter()
            .map(|e| Edge {
                src: e.src + 3,
                dst: e.dst + 3,
                ..*e
            })
            .collect();
        doubled.edges.extend(shifted);
        let s2 = model.predict_scalars(&[&doubled], Mode::Eval).unwrap();
        assert!((s2[0] - s[0]).abs() < 1e-14);

        for p in model.head.params_mut() {
            p.value.fill(0.0);
        }
        assert_eq!(model.predict_scalars(&[&g], Mode::Eval).unwrap(), vec![0.0]);
    }

    #[test]
    fn permutation_equivariance() {
        let model = CartNet::new(small_config(8, 2), stats()).unwrap();
        let g = toy_graph();
        let perm = [2, 0, 1];
        let gp = g.permute_nodes(&perm);
        let u = model.predict_adps(&[&g], Mode::Eval).unwrap();
        let up = model.predict_adps(&[&gp], Mode::Eval).unwrap();
        for k in 0..3 {
            assert!((u[k].0 - up[perm[k]].0).abs().max() < 1e-12);
        }
    }

    #[test]
    fn zeroed_extra_layers_reproduce_baseline() {
        let base = CartNet::new(small_config(8, 2), stats()).unwrap();
        let mut deep = CartNet::new(small_config(8, 4), stats()).unwrap();
        deep.atom = base.atom.clone();
        deep.edge = base.edge.clone();
        deep.head = base.head.clone();
        deep.layers[0] = base.layers[0].clone();
        deep.layers[1] = base.layers[1].clone();
        for l in &mut deep.layers[2..] {
            for p in l.params_mut() {
                if !p.name.ends_with("gamma") {
                    p.value.fill(0.0);
                }
            }
        }
        let g = toy_graph();
        let a = base.predict_adps(&[&g], Mode::Eval).unwrap();
        let b = deep.predict_adps(&[&g], Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn edge_at_cutoff_changes_nothing_in_eval() {
        let model = CartNet::new(small_config(8, 3), stats()).unwrap();
        let g = toy_graph();
        let mut extra = g.clone();
        extra.edges.push(Edge {
            src: 1,
            dst: 0,
            d: 5.0,
            v_hat: Vec3::new(0.0, 0.6, 0.8),
            image: [9, 9, 9],
        });
        let a = model.predict_adps(&[&g], Mode::Eval).unwrap();
        let b = model.predict_adps(&[&extra], Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = CartNet::new(small_config(8, 2), stats()).unwrap();
        let g = toy_graph();
        let batch = model.batch(&[&g, &g]).unwrap();
        let (_, cache) = model.forward(&batch, Mode::Train).unwrap();
        model.update_running(&cache);
        let ck = Checkpoint::from_json(&model.to_checkpoint().to_json().unwrap()).unwrap();
        let back = CartNet::from_checkpoint(&ck).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            back.predict_adps(&[&g], Mode::Eval).unwrap(),
            model.predict_adps(&[&g], Mode::Eval).unwrap()
        );
    }

    /// Loss probe `Σ_i <W_i, U_i>` over all nodes.
    fn probe(model: &CartNet, batch: &GraphBatch, w: &[Mat3], mode: Mode) -> f64 {
        match model.forward(batch, mode).unwrap().0 {
            Prediction::Adp(u) => u.iter().zip(w).map(|(u, w)| u.component_mul(w).sum()).sum(),
            Prediction::Scalar(_) => unreachable!(),
        }
    }

    #[test]
    fn end_to_end_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = CartNet::new(small_config(8, 2), stats()).unwrap();
        let g = toy_graph();
        let batch = model.batch(&[&g]).unwrap();
        let w: Vec<Mat3> = (0..3)
            .map(|_| Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        for mode in [Mode::Train, Mode::Eval] {
            model.zero_grad();
            let (_, cache) = model.forward(&batch, mode).unwrap();
            model
                .backward(&batch, &cache, &OutputGrad::Adp(w.clone()))
                .unwrap();
            let n_params = model.params().len();
            for pi in 0..n_params {
                let p = model.params()[pi].clone();
                let mut fd = Array2::zeros(p.value.raw_dim());
                let h = 1e-5;
                for idx in 0..p.value.len() {
                    let rc = (idx / p.value.ncols(), idx % p.value.ncols());
                    let mut m = model.clone();
                    m.params_mut()[pi].value[rc] += h;
                    let up = probe(&m, &batch, &w, mode);
                    m.params_mut()[pi].value[rc] -= 2.0 * h;
                    let down = probe(&m, &batch, &w, mode);
                    fd[rc] = (up - down) / (2.0 * h);
                }
                let err = relative_error_with_floor(&p.grad, &fd, 1e-6);
                assert!(err < 1e-4, "{} ({mode:?}): {err}", p.name);
            }
        }
    }
}
