//! ADP comparison metrics (MAE, S12, voxelised IoU) and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{ellipsoid_volume, AdpTensor, Mat3, Vec3, ORTEP_PROBABILITY};
use crate::elements;
use crate::graph::CrystalGraph;
use crate::kernels::Mode;
use crate::model::{AdpPredictor, CartNet, ModelError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Default voxel grid edge for [`adp_iou`].
pub const IOU_GRID: usize = 64;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{which} tensor is not positive definite (min eigenvalue {min_eigenvalue})")]
    NonPositiveDefinite {
        which: &'static str,
        min_eigenvalue: f64,
    },
    #[error("no target atoms to evaluate")]
    Empty,
    #[error("graph `{id}` predicted {got} nodes, expected {expected}")]
    PredictionLength {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Model(#[from] Box<ModelError>),
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<ModelError> for MetricError {
    fn from(e: ModelError) -> Self {
        MetricError::Model(Box::new(e))
    }
}

type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeVariant {
    /// Mean over all nine matrix entries.
    #[default]
    Full,
    /// Mean over the six unique entries.
    Unique,
}

/// Mean absolute difference over the nine entries of two tensors.
pub fn adp_mae(pred: &AdpTensor, target: &AdpTensor) -> f64 {
    adp_mae_with(pred, target, MaeVariant::Full)
}

pub fn adp_mae_with(pred: &AdpTensor, target: &AdpTensor, variant: MaeVariant) -> f64 {
    match variant {
        MaeVariant::Full => (pred.0 - target.0).abs().sum() / 9.0,
        MaeVariant::Unique => {
            let (a, b) = (pred.unique(), target.unique());
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 6.0
        }
    }
}

fn check_spd(u: &AdpTensor, which: &'static str) -> Result<()> {
    let (values, _) = u.eigendecompose();
    if values[2] > 0.0 {
        Ok(())
    } else {
        Err(MetricError::NonPositiveDefinite {
            which,
            min_eigenvalue: values[2],
        })
    }
}

/// Similarity index in percent: `100·(1 − BC)` where `BC` is the
/// Bhattacharyya coefficient of the two zero-mean Gaussians,
/// `2^{3/2}·(det U1·det U2)^{1/4} / det(U1 + U2)^{1/2}`.
pub fn s12(u1: &AdpTensor, u2: &AdpTensor) -> Result<f64> {
    check_spd(u1, "first")?;
    check_spd(u2, "second")?;
    let d1 = u1.0.determinant();
    let d2 = u2.0.determinant();
    // det(U1 + U2) evaluated symmetrically in the arguments
    let ds = (u1.0 + u2.0).determinant();
    let bc = 2f64.powf(1.5) * (d1 * d2).powf(0.25) / ds.sqrt();
    Ok((100.0 * (1.0 - bc)).clamp(0.0, 100.0))
}

/// Monte-Carlo estimate of the Bhattacharyya coefficient `∫√(p₁p₂)` by
/// importance sampling from `N(0, (U1+U2)/2)`. An independent check of the
/// closed form used by [`s12`].
pub fn bhattacharyya_monte_carlo<R: Rng + ?Sized>(
    u1: &Mat3,
    u2: &Mat3,
    samples: usize,
    rng: &mut R,
) -> f64 {
    let q = (u1 + u2) * 0.5;
    let lq = q.cholesky().expect("proposal covariance is SPD").l();
    let (i1, i2, iq) = (
        u1.try_inverse().expect("SPD"),
        u2.try_inverse().expect("SPD"),
        q.try_inverse().expect("SPD"),
    );
    let norm = |det: f64| 1.0 / ((2.0 * std::f64::consts::PI).powi(3) * det).sqrt();
    let (n1, n2, nq) = (
        norm(u1.determinant()),
        norm(u2.determinant()),
        norm(q.determinant()),
    );
    let mut acc = 0.0;
    for _ in 0..samples {
        let z = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let x = lq * z;
        let p1 = n1 * (-0.5 * x.dot(&(i1 * x))).exp();
        let p2 = n2 * (-0.5 * x.dot(&(i2 * x))).exp();
        let pq = nq * (-0.5 * x.dot(&(iq * x))).exp();
        acc += (p1 * p2).sqrt() / pq;
    }
    acc / samples as f64
}

/// Voxelised intersection over union in percent.
///
/// Both tensors are scaled by the larger of their spectral norms, the cube
/// `[-1, 1]³` is sampled at the centres of `grid³` cells, and a voxel belongs
/// to an ellipsoid when its Mahalanobis distance is at most 1.
pub fn adp_iou(u1: &AdpTensor, u2: &AdpTensor, grid: usize) -> Result<f64> {
    check_spd(u1, "first")?;
    check_spd(u2, "second")?;
    let scale = u1.eigendecompose().0[0].max(u2.eigendecompose().0[0]);
    let inv = |u: &AdpTensor| {
        let m = (u.0 / scale)
            .try_inverse()
            .expect("SPD tensor is invertible");
        (m + m.transpose()) * 0.5
    };
    let (a, b) = (inv(u1), inv(u2));
    let step = 2.0 / grid as f64;
    let coord = |i: usize| -1.0 + (i as f64 + 0.5) * step;
    let (inter, union) = (0..grid)
        .into_par_iter()
        .map(|i| {
            let x = coord(i);
            let mut inter = 0u64;
            let mut union = 0u64;
            for j in 0..grid {
                let y = coord(j);
                for k in 0..grid {
                    let z = coord(k);
                    // both ellipsoids lie inside the unit ball after scaling
                    if x * x + y * y + z * z > 1.0 {
                        continue;
                    }
                    let p = Vec3::new(x, y, z);
                    let in_a = p.dot(&(a * p)) <= 1.0;
                    let in_b = p.dot(&(b * p)) <= 1.0;
                    inter += u64::from(in_a && in_b);
                    union += u64::from(in_a || in_b);
                }
            }
            (inter, union)
        })
        .reduce(|| (0, 0), |l, r| (l.0 + r.0, l.1 + r.1));
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

/// Metrics of one predicted tensor against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub structure_id: String,
    /// Node index within the graph.
    pub atom_index: usize,
    pub element: String,
    pub temperature: Option<f64>,
    /// Ellipsoid volume of the reference tensor in Å³.
    pub volume: f64,
    /// Rotation index for rotation-consistency runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<usize>,
    pub mae: f64,
    pub s12: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarRecord {
    pub structure_id: String,
    pub predicted: f64,
    pub target: f64,
    pub abs_error: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            count: v.len(),
            mean,
            std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub key: String,
    pub count: usize,
    pub mae: Summary,
    pub s12: Summary,
    pub iou: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Adp,
    Scalar,
    RotationConsistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub kind: ReportKind,
    pub records: Vec<AtomRecord>,
    pub mae: Summary,
    pub s12: Summary,
    pub iou: Summary,
    /// Slice summaries keyed by `temperature`, `volume` and `element`.
    pub slices: BTreeMap<String, Vec<SliceSummary>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scalar_records: Vec<ScalarRecord>,
}

/// Temperature bin width in K for slice summaries.
pub const TEMPERATURE_BIN: f64 = 50.0;

/// Upper edges of the volume bins in Å³; the last bin is open.
pub const VOLUME_BIN_EDGES: [f64; 7] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.25];

fn temperature_key(t: Option<f64>) -> String {
    match t {
        None => "none".into(),
        Some(t) => {
            let lo = (t / TEMPERATURE_BIN).floor() * TEMPERATURE_BIN;
            format!("{lo:.0}-{:.0}", lo + TEMPERATURE_BIN)
        }
    }
}

fn volume_key(v: f64) -> String {
    let mut lo = 0.0;
    for edge in VOLUME_BIN_EDGES {
        if v < edge {
            return format!("{lo}-{edge}");
        }
        lo = edge;
    }
    format!(">={lo}")
}

type Keyer = Box<dyn Fn(&AtomRecord) -> String>;

impl MetricsReport {
    pub fn from_records(kind: ReportKind, mut records: Vec<AtomRecord>) -> Self {
        records.sort_by(|a, b| {
            a.structure_id
                .cmp(&b.structure_id)
                .then(a.rotation.cmp(&b.rotation))
                .then(a.atom_index.cmp(&b.atom_index))
        });
        let summarize = |rs: &[&AtomRecord], key: String| SliceSummary {
            key,
            count: rs.len(),
            mae: Summary::of(rs.iter().map(|r| r.mae)),
            s12: Summary::of(rs.iter().map(|r| r.s12)),
            iou: Summary::of(rs.iter().map(|r| r.iou)),
        };
        let mut slices = BTreeMap::new();
        let keyers: [(&str, Keyer); 3] = [
            ("temperature", Box::new(|r| temperature_key(r.temperature))),
            ("volume", Box::new(|r| volume_key(r.volume))),
            ("element", Box::new(|r| r.element.clone())),
        ];
        for (name, keyer) in keyers {
            let mut groups: BTreeMap<String, Vec<&AtomRecord>> = BTreeMap::new();
            for r in &records {
                groups.entry(keyer(r)).or_default().push(r);
            }
            let list = groups
                .into_iter()
                .map(|(k, rs)| summarize(&rs, k))
                .collect();
            slices.insert(name.to_string(), list);
        }
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            kind,
            mae: Summary::of(records.iter().map(|r| r.mae)),
            s12: Summary::of(records.iter().map(|r| r.s12)),
            iou: Summary::of(records.iter().map(|r| r.iou)),
            records,
            slices,
            scalar_records: Vec::new(),
        }
    }

    pub fn from_scalar_records(mut records: Vec<ScalarRecord>) -> Self {
        records.sort_by(|a, b| a.structure_id.cmp(&b.structure_id));
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            kind: ReportKind::Scalar,
            records: Vec::new(),
            mae: Summary::of(records.iter().map(|r| r.abs_error)),
            s12: Summary::default(),
            iou: Summary::default(),
            slices: BTreeMap::new(),
            scalar_records: records,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aggregates and slice summaries as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "schema_version,section,key,count,mae_mean,mae_std,s12_mean,s12_std,iou_mean,iou_std\n",
        );
        let mut row =
            |section: &str, key: &str, count: usize, m: &Summary, s: &Summary, i: &Summary| {
                let _ = writeln!(
                    out,
                    "{REPORT_SCHEMA_VERSION},{section},{key},{count},{:e},{:e},{},{},{},{}",
                    m.mean, m.std, s.mean, s.std, i.mean, i.std
                );
            };
        row(
            "overall",
            "all",
            self.mae.count,
            &self.mae,
            &self.s12,
            &self.iou,
        );
        for (name, list) in &self.slices {
            for sl in list {
                row(name, &sl.key, sl.count, &sl.mae, &sl.s12, &sl.iou);
            }
        }
        out
    }

    pub fn write(&self, json_path: &std::path::Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()?)?;
        std::fs::write(json_path.with_extension("csv"), self.to_csv())?;
        Ok(())
    }

    /// One-line `mean ± std` summary.
    pub fn summary_line(&self) -> String {
        match self.kind {
            ReportKind::Scalar => format!(
                "n={} MAE {:.4e} ± {:.4e}",
                self.mae.count, self.mae.mean, self.mae.std
            ),
            _ => format!(
                "n={} MAE {:.4e} ± {:.4e} Å², S12 {:.4} ± {:.4} %, IoU {:.2} ± {:.2} %",
                self.mae.count,
                self.mae.mean,
                self.mae.std,
                self.s12.mean,
                self.s12.std,
                self.iou.mean,
                self.iou.std
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub grid: usize,
    pub probability: f64,
    pub mae: MaeVariant,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            grid: IOU_GRID,
            probability: ORTEP_PROBABILITY,
            mae: MaeVariant::Full,
        }
    }
}

/// Builds the record for one predicted/reference pair.
pub fn compare(
    graph: &CrystalGraph,
    node: usize,
    pred: &AdpTensor,
    target: &AdpTensor,
    rotation: Option<usize>,
    opts: &EvalOptions,
) -> Result<AtomRecord> {
    Ok(AtomRecord {
        structure_id: graph.id.clone(),
        atom_index: node,
        element: elements::symbol(graph.z[node]).unwrap_or("X").to_string(),
        temperature: graph.temperature,
        volume: ellipsoid_volume(target, opts.probability).unwrap_or(f64::NAN),
        rotation,
        mae: adp_mae_with(pred, target, opts.mae),
        s12: s12(pred, target)?,
        iou: adp_iou(pred, target, opts.grid)?,
    })
}

/// Per-atom metrics over every non-hydrogen node that carries a target.
pub fn evaluate(
    predictor: &dyn AdpPredictor,
    graphs: &[CrystalGraph],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let per_graph: Vec<Result<Vec<AtomRecord>>> = graphs
        .par_iter()
        .map(|g| {
            let preds = predictor.predict_adp(g)?;
            if preds.len() != g.n_nodes {
                return Err(MetricError::PredictionLength {
                    id: g.id.clone(),
                    got: preds.len(),
                    expected: g.n_nodes,
                });
            }
            let mut out = Vec::new();
            for (i, pred) in preds.iter().enumerate() {
                if !g.node_has_target[i] {
                    continue;
                }
                if let (Some(p), Some(t)) = (pred, &g.targets[i]) {
                    out.push(compare(g, i, p, t, None, opts)?);
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
    Ok(MetricsReport::from_records(ReportKind::Adp, records))
}

/// Absolute error of a scalar-head model on every graph with a scalar target.
pub fn evaluate_scalar(model: &CartNet, graphs: &[CrystalGraph]) -> Result<MetricsReport> {
    let per_graph: Vec<Result<Option<ScalarRecord>>> = graphs
        .par_iter()
        .map(|g| {
            let Some(target) = g.scalar_target else {
                return Ok(None);
            };
            let predicted = model.predict_scalars(&[g], Mode::Eval)?[0];
            Ok(Some(ScalarRecord {
                structure_id: g.id.clone(),
                predicted,
                target,
                abs_error: (predicted - target).abs(),
            }))
        })
        .collect();
    let mut records = Vec::new();
    for r in per_graph {
        records.extend(r?);
    }
    if records.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(MetricsReport::from_scalar_records(records))
}
