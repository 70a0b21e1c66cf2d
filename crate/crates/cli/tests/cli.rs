use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cartnet_core::kernels::Checkpoint;
use serde_json::{json, Value};
use tempfile::TempDir;

fn cartnet(args: &[&str], data_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cartnet"))
        .args(args)
        .env("CARTNET_DATA_DIR", data_dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/golden")
}

/// P1 cell with two heavy atoms and one hydrogen.
fn cif(id: &str, a: f64, pair: (&str, &str), t: f64, u: f64) -> String {
    format!(
        "data_{id}
_cell_length_a {a}
_cell_length_b {b}
_cell_length_c {c}
_cell_angle_alpha 90
_cell_angle_beta 97
_cell_angle_gamma 90
_diffrn_ambient_temperature {t}
_refine_ls_R_factor_gt 0.035
loop_
_symmetry_equiv_pos_as_xyz
'x, y, z'
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
A1 {e1} 0.10 0.20 0.30
A2 {e2} 0.32 0.21 0.33
H1 H 0.05 0.35 0.30
loop_
_atom_site_aniso_label
_atom_site_aniso_U_11
_atom_site_aniso_U_22
_atom_site_aniso_U_33
_atom_site_aniso_U_12
_atom_site_aniso_U_13
_atom_site_aniso_U_23
A1 {u} {u2} {u3} 0.001 0 -0.0005
A2 {u3} {u} {u2} 0 0.0008 0
",
        b = a + 0.4,
        c = a + 0.9,
        e1 = pair.0,
        e2 = pair.1,
        u2 = u * 0.8,
        u3 = u * 0.65
    )
}

const PAIRS: [(&str, &str); 12] = [
    ("C", "O"),
    ("C", "N"),
    ("N", "O"),
    ("C", "S"),
    ("Si", "O"),
    ("C", "F"),
    ("P", "O"),
    ("C", "Cl"),
    ("N", "S"),
    ("B", "N"),
    ("Al", "O"),
    ("C", "Br"),
];

fn synthetic_cifs(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, pair) in PAIRS.iter().enumerate() {
        let text = cif(
            &format!("s{i:02}"),
            5.6 + 0.1 * i as f64,
            *pair,
            100.0 + 10.0 * i as f64,
            0.015 + 0.001 * i as f64,
        );
        std::fs::write(dir.join(format!("s{i:02}.cif")), text).unwrap();
    }
}

const RUN_CONFIG: &str = "
[model]
num_layers = 2
dim = 8
rbf_k = 8
cutoff = 5.0

[train]
batch_size = 2
grad_accumulation = 2
epochs = 3
so3_augment = false
seed = 3
";

fn write_oracle_ckpt(path: &Path, cutoff: f64) {
    Checkpoint::new("target_oracle", json!({ "cutoff": cutoff }))
        .save(path)
        .unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn ingest_golden_set_reports_each_reason() {
    let tmp = TempDir::new().unwrap();
    let o = cartnet(
        &[
            "ingest",
            "--cif-dir",
            golden_dir().to_str().unwrap(),
            "--out",
            "golden.jsonl",
        ],
        tmp.path(),
    );
    assert_ok(&o);
    let out = stdout(&o);
    assert!(out.contains("12 structures, 1 accepted"), "{out}");
    for code in [
        "RFactor: 2",
        "Occupancy: 1",
        "MissingTemperature: 1",
        "EigRatio: 1",
        "AdpTooLarge: 1",
        "NonPositiveAdp: 1",
    ] {
        assert!(out.contains(code), "missing `{code}` in {out}");
    }
    let data = std::fs::read_to_string(tmp.path().join("golden.jsonl")).unwrap();
    assert_eq!(data.lines().count(), 1);
    let summary = read_json(&tmp.path().join("golden.summary.json"));
    assert_eq!(summary["accepted"], 1);
}

#[test]
fn ingest_is_deterministic_and_no_curate_tags() {
    let tmp = TempDir::new().unwrap();
    let golden = golden_dir();
    let g = golden.to_str().unwrap();
    assert_ok(&cartnet(
        &["ingest", "--cif-dir", g, "--out", "a.jsonl", "--no-curate"],
        tmp.path(),
    ));
    assert_ok(&cartnet(
        &["ingest", "--cif-dir", g, "--out", "b.jsonl", "--no-curate"],
        tmp.path(),
    ));
    let a = std::fs::read(tmp.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(tmp.path().join("b.jsonl")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 12);
    let tagged = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<Value>(l)
                .unwrap()
                .get("reject")
                .is_some()
        })
        .count();
    assert_eq!(tagged, 11);
}

#[test]
fn ingest_survives_malformed_files() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("cifs");
    synthetic_cifs(&dir);
    std::fs::write(dir.join("broken.cif"), "data_x\n_cell_length_a\nloop_\n").unwrap();
    let o = cartnet(
        &["ingest", "--cif-dir", "cifs", "--out", "d.jsonl"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.cif"));
    let data = std::fs::read_to_string(tmp.path().join("d.jsonl")).unwrap();
    assert_eq!(data.lines().count(), PAIRS.len());
}

#[test]
fn full_pipeline_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synthetic_cifs(&d.join("cifs"));
    std::fs::write(d.join("run.toml"), RUN_CONFIG).unwrap();
    assert_ok(&cartnet(
        &["ingest", "--cif-dir", "cifs", "--out", "data.jsonl"],
        d,
    ));
    assert_ok(&cartnet(
        &[
            "split",
            "--data",
            "data.jsonl",
            "--out",
            "splits.json",
            "--seed",
            "1",
            "--fractions",
            "0.5,0.25,0.25",
        ],
        d,
    ));
    let splits = read_json(&d.join("splits.json"));
    assert_eq!(splits["train"].as_array().unwrap().len(), 6);

    let mut ckpts = Vec::new();
    for name in ["m1.json", "m2.json"] {
        let o = cartnet(
            &[
                "train",
                "--data",
                "data.jsonl",
                "--splits",
                "splits.json",
                "--config",
                "run.toml",
                "--out",
                name,
            ],
            d,
        );
        assert_ok(&o);
        ckpts.push(std::fs::read(d.join(name)).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
    let history = std::fs::read_to_string(d.join("m1.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    let mut reports = Vec::new();
    for (ckpt, report) in [("m1.json", "r1.json"), ("m2.json", "r2.json")] {
        let o = cartnet(
            &[
                "evaluate",
                "--ckpt",
                ckpt,
                "--data",
                "data.jsonl",
                "--splits",
                "splits.json",
                "--split",
                "test",
                "--report",
                report,
            ],
            d,
        );
        assert_ok(&o);
        assert!(stdout(&o).contains("IoU"));
        reports.push(std::fs::read(d.join(report)).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let report = read_json(&d.join("r1.json"));
    assert_eq!(report["schema_version"], 1);
    assert!(report["slices"]["element"].is_array());
    assert!(d.join("r1.csv").exists());

    let o = cartnet(
        &[
            "rotcheck",
            "--ckpt",
            "m1.json",
            "--data",
            "data.jsonl",
            "--n",
            "3",
            "--seed",
            "2",
            "--report",
            "rot.json",
        ],
        d,
    );
    assert_ok(&o);
    let rot = read_json(&d.join("rot.json"));
    assert_eq!(rot["kind"], "rotation_consistency");
    assert!(rot["mae"]["std"].is_number());

    let o = cartnet(
        &[
            "predict",
            "--ckpt",
            "m1.json",
            "--cif",
            "cifs/s00.cif",
            "--temperature",
            "250",
            "--out",
            "pred.json",
        ],
        d,
    );
    assert_ok(&o);
    assert!(stdout(&o).contains("T = 250 K"));
    assert_eq!(read_json(&d.join("pred.json")).as_array().unwrap().len(), 2);
}

#[test]
fn predict_one_atom_gives_one_spd_tensor() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let text = "data_one
_cell_length_a 5
_cell_length_b 5
_cell_length_c 5
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
_diffrn_ambient_temperature 120
loop_
_atom_site_label
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
C1 0 0 0
";
    std::fs::write(d.join("one.cif"), text).unwrap();
    std::fs::write(d.join("run.toml"), RUN_CONFIG).unwrap();
    let cfg: cartnet_core::train::RunConfig = toml::from_str(RUN_CONFIG).unwrap();
    let net = cartnet_core::model::CartNet::new(cfg.model, Default::default()).unwrap();
    net.to_checkpoint().save(&d.join("net.json")).unwrap();
    let o = cartnet(
        &[
            "predict", "--ckpt", "net.json", "--cif", "one.cif", "--out", "p.json",
        ],
        d,
    );
    assert_ok(&o);
    let rows = read_json(&d.join("p.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 1);
    let u: Vec<f64> = rows[0]["u"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let tensor = cartnet_core::AdpTensor::from_unique([u[0], u[1], u[2], u[3], u[4], u[5]]);
    assert!(tensor.is_positive_definite());
}

#[test]
fn oracle_evaluate_and_identity_rotcheck() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synthetic_cifs(&d.join("cifs"));
    assert_ok(&cartnet(
        &["ingest", "--cif-dir", "cifs", "--out", "data.jsonl"],
        d,
    ));
    write_oracle_ckpt(&d.join("oracle.json"), 5.0);
    let o = cartnet(
        &[
            "evaluate",
            "--ckpt",
            "oracle.json",
            "--data",
            "data.jsonl",
            "--report",
            "r.json",
        ],
        d,
    );
    assert_ok(&o);
    let r = read_json(&d.join("r.json"));
    assert_eq!(r["iou"]["mean"], 100.0);
    assert_eq!(r["mae"]["mean"], 0.0);
    assert_eq!(r["records"].as_array().unwrap().len(), 2 * PAIRS.len());

    let o = cartnet(
        &[
            "rotcheck",
            "--ckpt",
            "oracle.json",
            "--data",
            "data.jsonl",
            "--n",
            "1",
            "--identity",
            "--report",
            "rc.json",
        ],
        d,
    );
    assert_ok(&o);
    let r = read_json(&d.join("rc.json"));
    assert_eq!(r["mae"]["mean"], 0.0);
    assert_eq!(r["iou"]["mean"], 100.0);
}

#[test]
fn config_checkpoint_mismatch_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synthetic_cifs(&d.join("cifs"));
    write_oracle_ckpt(&d.join("oracle.json"), 4.0);
    std::fs::write(d.join("run.toml"), RUN_CONFIG).unwrap();
    let o = cartnet(
        &[
            "predict",
            "--ckpt",
            "oracle.json",
            "--config",
            "run.toml",
            "--cif",
            "cifs/s00.cif",
        ],
        d,
    );
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("5") && err.contains("4") && err.contains("cutoff"),
        "{err}"
    );

    let cfg: cartnet_core::train::RunConfig = toml::from_str(RUN_CONFIG).unwrap();
    let net = cartnet_core::model::CartNet::new(
        cartnet_core::model::ModelConfig {
            dim: 12,
            ..cfg.model
        },
        Default::default(),
    )
    .unwrap();
    net.to_checkpoint().save(&d.join("net.json")).unwrap();
    let o = cartnet(
        &[
            "predict",
            "--ckpt",
            "net.json",
            "--config",
            "run.toml",
            "--cif",
            "cifs/s00.cif",
        ],
        d,
    );
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        !o.status.success() && err.contains("dim = 8") && err.contains("dim = 12"),
        "{err}"
    );
}

#[test]
fn plot_ellipsoids_geometry() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let u = 0.02;
    let text = format!(
        "data_iso
_cell_length_a 6
_cell_length_b 6
_cell_length_c 6
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
_diffrn_ambient_temperature 100
loop_
_atom_site_label
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
C1 0.25 0.25 0.25
H1 0.40 0.25 0.25
loop_
_atom_site_aniso_label
_atom_site_aniso_U_11
_atom_site_aniso_U_22
_atom_site_aniso_U_33
_atom_site_aniso_U_12
_atom_site_aniso_U_13
_atom_site_aniso_U_23
C1 {u} {u} {u} 0 0 0
"
    );
    std::fs::write(d.join("iso.cif"), text).unwrap();
    write_oracle_ckpt(&d.join("oracle.json"), 5.0);
    let o = cartnet(
        &[
            "plot-ellipsoids",
            "--ckpt",
            "oracle.json",
            "--cif",
            "iso.cif",
            "--out",
            "plot",
            "--against-experimental",
        ],
        d,
    );
    assert_ok(&o);
    let recs = read_json(&d.join("plot/ellipsoids.json"));
    let recs = recs.as_array().unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["iou"], 100.0);
    let expected_r = 1.5381722544550522 * f64::sqrt(u);
    for r in recs[0]["radii"].as_array().unwrap() {
        assert!((r.as_f64().unwrap() - expected_r).abs() < 1e-9);
    }
    // re-import: eigenvalues recomputed from the stored tensor match
    let uu: Vec<f64> = recs[0]["u"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let t = cartnet_core::AdpTensor::from_unique([uu[0], uu[1], uu[2], uu[3], uu[4], uu[5]]);
    let (vals, _) = t.eigendecompose();
    for (k, v) in recs[0]["eigenvalues"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
    {
        assert!((v.as_f64().unwrap() - vals[k]).abs() < 1e-9);
    }
    // every mesh vertex lies on the sphere of radius k·√u around the centre
    let center: Vec<f64> = recs[0]["center"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let obj = std::fs::read_to_string(d.join("plot/ellipsoids.obj")).unwrap();
    let mut n = 0;
    for line in obj.lines().filter(|l| l.starts_with("v ")) {
        let p: Vec<f64> = line[2..]
            .split_whitespace()
            .map(|x| x.parse().unwrap())
            .collect();
        let r =
            ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2))
                .sqrt();
        assert!((r - expected_r).abs() < 2e-6, "{r} vs {expected_r}");
        n += 1;
    }
    assert!(n > 10);
    assert!(obj.lines().any(|l| l.starts_with("f ")));

    let o = cartnet(
        &[
            "plot-ellipsoids",
            "--ckpt",
            "oracle.json",
            "--cif",
            "iso.cif",
            "--out",
            "plot2",
        ],
        d,
    );
    assert_ok(&o);
    assert!(read_json(&d.join("plot2/ellipsoids.json"))[0]
        .get("iou")
        .is_none());
}

#[test]
fn plot_against_experimental_requires_adps() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    synthetic_cifs(&d.join("cifs"));
    let text = std::fs::read_to_string(d.join("cifs/s00.cif")).unwrap();
    let stripped: String = text
        .lines()
        .filter(|l| !l.starts_with("A2 "))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(
        d.join("partial.cif"),
        stripped.replace(
            "A1 C 0.10 0.20 0.30",
            "A1 C 0.10 0.20 0.30\nA2 O 0.32 0.21 0.33",
        ),
    )
    .unwrap();
    let cfg: cartnet_core::train::RunConfig = toml::from_str(RUN_CONFIG).unwrap();
    let net = cartnet_core::model::CartNet::new(cfg.model, Default::default()).unwrap();
    net.to_checkpoint().save(&d.join("net.json")).unwrap();
    let o = cartnet(
        &[
            "plot-ellipsoids",
            "--ckpt",
            "net.json",
            "--cif",
            "partial.cif",
            "--out",
            "p",
            "--against-experimental",
        ],
        d,
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("MissingAdp"));
}

#[test]
fn data_dir_flag_and_env_resolve_relative_paths() {
    let tmp = TempDir::new().unwrap();
    let other = TempDir::new().unwrap();
    synthetic_cifs(&tmp.path().join("cifs"));
    let o = Command::new(env!("CARGO_BIN_EXE_cartnet"))
        .args([
            "--data-dir",
            tmp.path().to_str().unwrap(),
            "ingest",
            "--cif-dir",
            "cifs",
            "--out",
            "x.jsonl",
        ])
        .env("CARTNET_DATA_DIR", other.path())
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(tmp.path().join("x.jsonl").exists());
    assert!(!other.path().join("x.jsonl").exists());
}
