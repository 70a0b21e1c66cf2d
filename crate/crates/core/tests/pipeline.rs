use std::path::Path;

use cartnet_core::augment::{augment_graph, sample_rotations};
use cartnet_core::cif::{
    curate, load_cif, read_dataset, split_dataset, write_dataset, CurationCriteria,
};
use cartnet_core::graph::build_graph;
use cartnet_core::kernels::Checkpoint;
use cartnet_core::model::{AdpPredictor, CartNet, EquivariantStub, ModelConfig};
use cartnet_core::train::{train, validation_mae, TrainConfig};
use cartnet_core::{AdpTensor, AtomSite, CrystalGraph, CrystalStructure, LatticeCell, Mat3, Vec3};

fn structures() -> Vec<CrystalStructure> {
    let heavy = [
        (6u8, 8u8),
        (6, 7),
        (7, 8),
        (6, 16),
        (14, 8),
        (6, 9),
        (15, 8),
        (6, 17),
    ];
    heavy
        .iter()
        .enumerate()
        .map(|(i, &(z1, z2))| {
            let a = 5.5 + 0.1 * i as f64;
            let cell = LatticeCell::new(a, a + 0.3, a + 0.7, 90.0, 96.0, 90.0).unwrap();
            let u = 0.015 + 0.002 * i as f64;
            let sites = vec![
                AtomSite::new(&cell, z1, Vec3::new(0.1, 0.2, 0.3)).with_adp(
                    AdpTensor::from_unique([u, 0.8 * u, 0.7 * u, 0.001, 0.0, -0.0005]),
                ),
                AtomSite::new(&cell, z2, Vec3::new(0.33, 0.22, 0.31)).with_adp(
                    AdpTensor::from_unique([0.7 * u, u, 0.9 * u, 0.0, 0.0008, 0.0]),
                ),
                AtomSite::new(&cell, 1, Vec3::new(0.05, 0.36, 0.3)),
            ];
            CrystalStructure::new(format!("p{i}"), cell, sites)
                .with_temperature(100.0 + 15.0 * i as f64)
                .with_r_factor(0.03)
        })
        .collect()
}

fn graphs(s: &[CrystalStructure]) -> Vec<CrystalGraph> {
    s.iter().map(|s| build_graph(s, 5.0).unwrap()).collect()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        dim: 8,
        rbf_k: 8,
        cutoff: 5.0,
        ..Default::default()
    }
}

#[test]
fn checkpoint_round_trip_reproduces_validation_mae() {
    let g = graphs(&structures());
    let (tr, val) = g.split_at(6);
    let cfg = TrainConfig {
        batch_size: 2,
        grad_accumulation: 1,
        epochs: 2,
        ..Default::default()
    };
    let out = train(tr, val, &model_config(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    out.best.to_checkpoint().save(&path).unwrap();
    let restored = CartNet::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let json = |m: &CartNet| serde_json::to_string(&m.to_checkpoint()).unwrap();
    assert_eq!(json(&restored), json(&out.best));
    let a = validation_mae(&out.best, val, 2).unwrap();
    let b = validation_mae(&restored, val, 2).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(out.best_val_mae.map(f64::to_bits), Some(a.to_bits()));
}

#[test]
fn augmentation_rotates_targets_with_equivariant_predictions() {
    let stub = EquivariantStub::default();
    for g in graphs(&structures()) {
        let base = stub.predict_adp(&g).unwrap();
        for r in sample_rotations(5, 3) {
            let a = augment_graph(&g, &r);
            let rotated = stub.predict_adp(&a).unwrap();
            for i in 0..g.z.len() {
                let rot = |u: &Mat3| r.matrix() * u * r.matrix().transpose();
                if let (Some(p), Some(q)) = (base[i], rotated[i]) {
                    assert!((rot(&p.0) - q.0).abs().max() < 1e-12);
                }
                if let (Some(t), Some(ta)) = (g.targets[i], a.targets[i]) {
                    assert!((rot(&t.0) - ta.0).abs().max() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn dataset_split_graph_round_trip() {
    let s = structures();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&s, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, s);
    let split = split_dataset(&back, 4, (0.5, 0.25, 0.25)).unwrap();
    assert_eq!(split.len(), s.len());
    let g1 = graphs(&s);
    let g2 = graphs(&back);
    assert_eq!(g1, g2);
}

#[test]
fn golden_cifs_trigger_expected_codes() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden");
    let expected = std::fs::read_to_string(dir.join("expected.txt")).unwrap();
    for line in expected.lines().filter(|l| !l.is_empty()) {
        let (file, want) = line.split_once(' ').unwrap();
        let s = load_cif(&std::fs::read_to_string(dir.join(file)).unwrap()).unwrap();
        assert_eq!(s.len(), 1, "{file}");
        let got = curate(&s[0], &CurationCriteria::default())
            .code()
            .map(|c| c.to_string())
            .unwrap_or_else(|| "Accept".into());
        assert_eq!(got, want, "{file}");
    }
}
