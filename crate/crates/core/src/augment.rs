//! SO(3) augmentation of graphs and ADP targets, and the
//! rotation-consistency harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::crystal::{AdpTensor, Rotation};
use crate::graph::CrystalGraph;
use crate::metrics::{compare, AtomRecord, EvalOptions, MetricError, MetricsReport, ReportKind};
use crate::model::AdpPredictor;

/// Haar-uniform rotation from a normalised Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return Rotation::from_quaternion(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        }
    }
}

/// Independent stream for structure `index` in `epoch`, so results do not
/// depend on iteration order or worker count.
pub fn augmentation_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

/// Rotates every edge direction; distances and everything else are kept.
pub fn rotate_graph(graph: &CrystalGraph, r: &Rotation) -> CrystalGraph {
    let mut out = graph.clone();
    for e in &mut out.edges {
        e.v_hat = r.apply(&e.v_hat);
    }
    out
}

/// `R·U·Rᵀ`, symmetrised.
pub fn rotate_adp(u: &AdpTensor, r: &Rotation) -> AdpTensor {
    let m = r.matrix() * u.0 * r.matrix().transpose();
    AdpTensor((m + m.transpose()) * 0.5)
}

/// Rotates edge directions and ADP targets together, as used for training.
pub fn augment_graph(graph: &CrystalGraph, r: &Rotation) -> CrystalGraph {
    let mut out = rotate_graph(graph, r);
    for t in out.targets.iter_mut().flatten() {
        *t = rotate_adp(t, r);
    }
    out
}

pub fn sample_rotations(n: usize, seed: u64) -> Vec<Rotation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_rotation(&mut rng)).collect()
}

/// Compares predictions on rotated inputs with rotated predictions on the
/// original inputs, for every structure, rotation and predicted atom.
/// Atoms are restricted to target atoms when the graph has any.
pub fn rotation_consistency(
    predictor: &dyn AdpPredictor,
    graphs: &[CrystalGraph],
    rotations: &[Rotation],
    opts: &EvalOptions,
) -> Result<MetricsReport, MetricError> {
    let per_graph: Vec<Result<Vec<AtomRecord>, MetricError>> = graphs
        .par_iter()
        .map(|g| {
            let base = predictor.predict_adp(g)?;
            let use_mask = g.node_has_target.iter().any(|&t| t);
            let mut out = Vec::new();
            for (ri, r) in rotations.iter().enumerate() {
                let rotated = predictor.predict_adp(&rotate_graph(g, r))?;
                for i in 0..g.n_nodes {
                    if use_mask && !g.node_has_target[i] {
                        continue;
                    }
                    if let (Some(u0), Some(ur)) = (&base[i], &rotated[i]) {
                        let expected = rotate_adp(u0, r);
                        out.push(compare(g, i, ur, &expected, Some(ri), opts)?);
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_graph {
        records.extend(r?);
    }
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(MetricsReport::from_records(
        ReportKind::RotationConsistency,
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{AtomSite, CrystalStructure, LatticeCell, Mat3, Vec3};
    use crate::graph::build_graph;
    use crate::model::EquivariantStub;

    fn graph() -> CrystalGraph {
        let cell = LatticeCell::new(5.1, 5.9, 6.3, 92.0, 97.0, 85.0).unwrap();
        let sites = vec![
            AtomSite::new(&cell, 6, Vec3::new(0.1, 0.2, 0.3)).with_adp(AdpTensor::isotropic(0.02)),
            AtomSite::new(&cell, 8, Vec3::new(0.4, 0.1, 0.6)).with_adp(AdpTensor::from_unique([
                0.03, 0.02, 0.025, 0.004, 0.0, -0.002,
            ])),
            AtomSite::new(&cell, 1, Vec3::new(0.2, 0.3, 0.35)),
        ];
        build_graph(
            &CrystalStructure::new("g", cell, sites).with_temperature(120.0),
            5.0,
        )
        .unwrap()
    }

    #[test]
    fn rotations_are_proper_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let m = r.matrix();
            assert!((m * m.transpose() - Mat3::identity()).abs().max() < 1e-12);
            assert!((m.determinant() - 1.0).abs() < 1e-12);
        }
        assert_eq!(sample_rotations(5, 9), sample_rotations(5, 9));
        assert_ne!(sample_rotations(5, 9), sample_rotations(5, 10));
    }

    #[test]
    fn haar_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let mut acc = Mat3::zeros();
        for _ in 0..n {
            acc += random_rotation(&mut rng).matrix();
        }
        assert!((acc / n as f64).abs().max() < 0.01);
    }

    #[test]
    fn rotate_graph_properties() {
        let g = graph();
        assert_eq!(rotate_graph(&g, &Rotation::identity()), g);
        let r = sample_rotations(1, 1)[0];
        let gr = rotate_graph(&g, &r);
        for (a, b) in g.edges.iter().zip(&gr.edges) {
            assert_eq!(a.d, b.d);
            assert!((b.v_hat.norm() - 1.0).abs() < 1e-12);
        }
        let back = rotate_graph(&gr, &r.inverse());
        for (a, b) in g.edges.iter().zip(&back.edges) {
            assert!((a.v_hat - b.v_hat).norm() < 1e-12);
        }
        assert_eq!(gr.targets, g.targets);
    }

    #[test]
    fn rotate_adp_examples() {
        let u = AdpTensor(Mat3::from_diagonal(&Vec3::new(1.0, 2.0, 3.0)));
        assert_eq!(rotate_adp(&u, &Rotation::identity()), u);
        let rz = Rotation::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2);
        let v = rotate_adp(&u, &rz);
        assert!(
            (v.0 - Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 3.0)))
                .abs()
                .max()
                < 1e-12
        );
    }

    #[test]
    fn group_action() {
        let rs = sample_rotations(2, 3);
        let u = AdpTensor::from_unique([0.03, 0.02, 0.025, 0.004, 0.001, -0.002]);
        let two_step = rotate_adp(&rotate_adp(&u, &rs[0]), &rs[1]);
        let one_step = rotate_adp(&u, &rs[1].compose(&rs[0]));
        assert!((two_step.0 - one_step.0).abs().max() < 1e-10);
    }

    #[test]
    fn augmentation_rng_streams() {
        use rand::RngCore;
        let a = augmentation_rng(1, 0, 0).next_u64();
        assert_eq!(a, augmentation_rng(1, 0, 0).next_u64());
        assert_ne!(a, augmentation_rng(1, 0, 1).next_u64());
        assert_ne!(a, augmentation_rng(1, 1, 0).next_u64());
    }

    #[test]
    fn identity_rotation_is_exact() {
        let g = graph();
        let report = rotation_consistency(
            &EquivariantStub::default(),
            &[g],
            &[Rotation::identity()],
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(report.mae.mean, 0.0);
        assert_eq!(report.s12.mean, 0.0);
        assert_eq!(report.iou.mean, 100.0);
        assert_eq!(report.records.len(), 2);
    }

    #[test]
    fn equivariant_stub_is_consistent() {
        let g = graph();
        let rs = sample_rotations(5, 4);
        let report = rotation_consistency(
            &EquivariantStub::default(),
            &[g],
            &rs,
            &EvalOptions::default(),
        )
        .unwrap();
        assert!(report.mae.mean <= 1e-12);
        assert_eq!(report.iou.mean, 100.0);
    }
}
