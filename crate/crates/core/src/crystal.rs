//! Crystallographic domain types and cell/ADP geometry.
//!
//! Conventions: the lattice matrix stores the cell vectors as rows, with `a`
//! along +x and `b` in the xy-plane. Fractional coordinates are row vectors,
//! so `cart = frac · M`. Angles are given in degrees; all stored geometry is
//! in Å and Å².

use std::f64::consts::PI;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::elements;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Probability enclosed by the conventional ORTEP ellipsoid surface.
pub const ORTEP_PROBABILITY: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrystalError {
    #[error("degenerate cell: {0}")]
    DegenerateCell(String),
    #[error("invalid cell parameter: {0}")]
    InvalidCell(String),
    #[error("tensor is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NonPositiveDefinite { min_eigenvalue: f64 },
    #[error("unknown element with atomic number {0}")]
    UnknownElement(u32),
    #[error("matrix is not a proper rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid structure {id}: {reason}")]
    InvalidStructure { id: String, reason: String },
    #[error("probability {0} outside (0, 1)")]
    InvalidProbability(f64),
}

type Result<T> = std::result::Result<T, CrystalError>;

/// Cosine of an angle in degrees, snapped to exactly zero at right angles
/// so orthogonal cells come out diagonal.
fn cos_deg(deg: f64) -> f64 {
    let c = deg.to_radians().cos();
    if c.abs() < 1e-15 {
        0.0
    } else {
        c
    }
}

/// Lattice matrix (rows are cell vectors) from cell lengths and angles.
pub fn cell_to_matrix(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Mat3> {
    for (name, v) in [("a", a), ("b", b), ("c", c)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(CrystalError::InvalidCell(format!("{name} = {v}")));
        }
    }
    for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
        if !(v.is_finite() && v > 0.0 && v < 180.0) {
            return Err(CrystalError::InvalidCell(format!("{name} = {v}")));
        }
    }
    let (ca, cb, cg) = (cos_deg(alpha), cos_deg(beta), cos_deg(gamma));
    let sg = gamma.to_radians().sin();
    let vol_factor = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg;
    if vol_factor <= 0.0 {
        return Err(CrystalError::DegenerateCell(format!(
            "volume^2 factor {vol_factor:e} for angles ({alpha}, {beta}, {gamma})"
        )));
    }
    let cx = c * cb;
    let cy = c * (ca - cb * cg) / sg;
    let cz = c * vol_factor.sqrt() / sg;
    Ok(Matrix3::new(
        a,
        0.0,
        0.0, //
        b * cg,
        b * sg,
        0.0, //
        cx,
        cy,
        cz,
    ))
}

/// Unit cell with its cached lattice matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeCell {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Rows are the cell vectors in Å.
    pub matrix: Mat3,
}

impl LatticeCell {
    pub fn new(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let matrix = cell_to_matrix(a, b, c, alpha, beta, gamma)?;
        Ok(Self {
            a,
            b,
            c,
            alpha,
            beta,
            gamma,
            matrix,
        })
    }

    pub fn cubic(a: f64) -> Result<Self> {
        Self::new(a, a, a, 90.0, 90.0, 90.0)
    }

    pub fn volume(&self) -> f64 {
        self.matrix.determinant()
    }

    /// Rows are the reciprocal vectors a*, b*, c* (no 2π factor).
    pub fn reciprocal(&self) -> Result<Mat3> {
        self.matrix
            .try_inverse()
            .map(|inv| inv.transpose())
            .ok_or_else(|| CrystalError::DegenerateCell("singular lattice matrix".into()))
    }

    /// Perpendicular distances between opposite faces, `V / area(face_i)`.
    pub fn face_widths(&self) -> Result<[f64; 3]> {
        let recip = self.reciprocal()?;
        let mut w = [0.0; 3];
        for (i, wi) in w.iter_mut().enumerate() {
            let n = recip.row(i).norm();
            if !(n.is_finite() && n > 0.0) {
                return Err(CrystalError::DegenerateCell("zero face width".into()));
            }
            *wi = 1.0 / n;
        }
        Ok(w)
    }

    pub fn frac_to_cart(&self, frac: &Vec3) -> Vec3 {
        frac_to_cart(self, frac)
    }

    pub fn cart_to_frac(&self, cart: &Vec3) -> Result<Vec3> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| CrystalError::DegenerateCell("singular lattice matrix".into()))?;
        Ok((cart.transpose() * inv).transpose())
    }
}

/// `frac · M` for the row-vector convention.
pub fn frac_to_cart(cell: &LatticeCell, frac: &Vec3) -> Vec3 {
    (frac.transpose() * cell.matrix).transpose()
}

/// Symmetric 3×3 displacement tensor in Å².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdpTensor(pub Mat3);

impl AdpTensor {
    pub fn new(u: Mat3) -> Self {
        Self(u)
    }

    pub fn isotropic(u: f64) -> Self {
        Self(Mat3::identity() * u)
    }

    /// From the six unique entries in the order `u11, u22, u33, u12, u13, u23`.
    pub fn from_unique(u: [f64; 6]) -> Self {
        Self(Matrix3::new(
            u[0], u[3], u[4], //
            u[3], u[1], u[5], //
            u[4], u[5], u[2],
        ))
    }

    /// The six unique entries `u11, u22, u33, u12, u13, u23`.
    pub fn unique(&self) -> [f64; 6] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(1, 1)],
            m[(2, 2)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 2)],
        ]
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn asymmetry(&self) -> f64 {
        (self.0 - self.0.transpose()).abs().max()
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry() <= 1e-10
    }

    /// Eigenvalues in descending order with matching eigenvector columns.
    pub fn eigendecompose(&self) -> (Vec3, Mat3) {
        adp_eigendecompose(self)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.eigendecompose().0[2] > 0.0
    }

    /// Equivalent isotropic displacement, trace / 3.
    pub fn u_equiv(&self) -> f64 {
        self.0.trace() / 3.0
    }
}

/// Eigen-decomposition of a symmetric tensor; eigenvalues descending, the
/// eigenvectors are the columns of the returned matrix.
pub fn adp_eigendecompose(adp: &AdpTensor) -> (Vec3, Mat3) {
    // Symmetrise so round-off asymmetry never leaks into the solver.
    let sym = (adp.0 + adp.0.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Vec3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let vectors = Mat3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    (values, vectors)
}

/// `A·N` where `A` has the cell vectors as columns and `N` holds the
/// reciprocal lengths on its diagonal.
fn cif_basis(cell: &LatticeCell) -> Result<Mat3> {
    let recip = cell.reciprocal()?;
    let n = Mat3::from_diagonal(&Vec3::new(
        recip.row(0).norm(),
        recip.row(1).norm(),
        recip.row(2).norm(),
    ));
    Ok(cell.matrix.transpose() * n)
}

/// Converts a CIF `U_aniso` tensor (`Uij` convention) into Cartesian axes.
pub fn adp_cif_to_cartesian(cell: &LatticeCell, u_cif: &Mat3) -> Result<AdpTensor> {
    let an = cif_basis(cell)?;
    let u = an * u_cif * an.transpose();
    Ok(AdpTensor((u + u.transpose()) * 0.5))
}

/// Inverse of [`adp_cif_to_cartesian`].
pub fn adp_cartesian_to_cif(cell: &LatticeCell, adp: &AdpTensor) -> Result<Mat3> {
    let an = cif_basis(cell)?;
    let inv = an
        .try_inverse()
        .ok_or_else(|| CrystalError::DegenerateCell("singular lattice matrix".into()))?;
    let u = inv * adp.0 * inv.transpose();
    Ok((u + u.transpose()) * 0.5)
}

/// Cumulative distribution of the chi-square distribution with 3 degrees
/// of freedom.
fn chi3_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    libm::erf((x / 2.0).sqrt()) - (2.0 * x / PI).sqrt() * (-x / 2.0).exp()
}

fn chi3_pdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    x.sqrt() * (-x / 2.0).exp() / (2.0 * PI).sqrt()
}

/// Scale factor `k` such that the surface `xᵀU⁻¹x = k²` encloses the given
/// probability of a trivariate Gaussian.
pub fn probability_scale(probability: f64) -> Result<f64> {
    if !(probability > 0.0 && probability < 1.0) {
        return Err(CrystalError::InvalidProbability(probability));
    }
    // Bisection on the closed-form CDF, then Newton polishing.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while chi3_cdf(hi) < probability {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if chi3_cdf(mid) < probability {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..3 {
        x -= (chi3_cdf(x) - probability) / chi3_pdf(x);
    }
    Ok(x.sqrt())
}

/// Volume in Å³ of the ellipsoid enclosing `probability` of the displacement
/// distribution, `(4π/3)·k³·√det(U)`.
pub fn ellipsoid_volume(adp: &AdpTensor, probability: f64) -> Result<f64> {
    let (values, _) = adp.eigendecompose();
    if !(values[2] > 0.0) {
        return Err(CrystalError::NonPositiveDefinite {
            min_eigenvalue: values[2],
        });
    }
    let k = probability_scale(probability)?;
    let det = values[0] * values[1] * values[2];
    Ok(4.0 / 3.0 * PI * k.powi(3) * det.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomSite {
    pub atomic_number: u8,
    pub frac_pos: Vec3,
    pub cart_pos: Vec3,
    pub adp: Option<AdpTensor>,
    pub occupancy: f64,
}

impl AtomSite {
    pub fn new(cell: &LatticeCell, atomic_number: u8, frac_pos: Vec3) -> Self {
        Self {
            atomic_number,
            cart_pos: cell.frac_to_cart(&frac_pos),
            frac_pos,
            adp: None,
            occupancy: 1.0,
        }
    }

    pub fn with_adp(mut self, adp: AdpTensor) -> Self {
        self.adp = Some(adp);
        self
    }

    pub fn with_occupancy(mut self, occupancy: f64) -> Self {
        self.occupancy = occupancy;
        self
    }

    pub fn is_hydrogen(&self) -> bool {
        self.atomic_number == 1
    }
}

/// A full unit cell (symmetry expanded) with its experimental metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CrystalStructure {
    pub id: String,
    pub cell: LatticeCell,
    pub sites: Vec<AtomSite>,
    /// Kelvin.
    pub temperature: Option<f64>,
    /// Refinement residual as a fraction (0.05 = 5 %).
    pub r_factor: Option<f64>,
    pub has_remarks: bool,
    /// Scalar property for non-ADP datasets.
    pub target: Option<f64>,
}

impl CrystalStructure {
    pub fn new(id: impl Into<String>, cell: LatticeCell, sites: Vec<AtomSite>) -> Self {
        Self {
            id: id.into(),
            cell,
            sites,
            temperature: None,
            r_factor: None,
            has_remarks: false,
            target: None,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }

    pub fn with_r_factor(mut self, r: f64) -> Self {
        self.r_factor = Some(r);
        self
    }

    pub fn has_any_adp(&self) -> bool {
        self.sites.iter().any(|s| s.adp.is_some())
    }

    /// Checks the structural invariants: non-empty, known elements,
    /// Cartesian positions consistent with the cell and temperature present
    /// whenever ADPs are.
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| CrystalError::InvalidStructure {
            id: self.id.clone(),
            reason,
        };
        if self.sites.is_empty() {
            return Err(invalid("no atom sites".into()));
        }
        for (i, site) in self.sites.iter().enumerate() {
            if site.atomic_number == 0 || site.atomic_number > elements::MAX_ATOMIC_NUMBER {
                return Err(CrystalError::UnknownElement(u32::from(site.atomic_number)));
            }
            let expect = self.cell.frac_to_cart(&site.frac_pos);
            if (expect - site.cart_pos).norm() > 1e-8 {
                return Err(invalid(format!(
                    "site {i} Cartesian position disagrees with cell"
                )));
            }
            if !(site.occupancy > 0.0 && site.occupancy <= 1.0) {
                return Err(invalid(format!("site {i} occupancy {}", site.occupancy)));
            }
        }
        if self.has_any_adp() && self.temperature.is_none() {
            return Err(invalid("ADPs present without a temperature".into()));
        }
        Ok(())
    }

    /// Chemical formula of the cell content in Hill order with counts reduced
    /// by their common divisor.
    pub fn reduced_formula(&self) -> String {
        let mut counts = [0usize; 104];
        for s in &self.sites {
            counts[usize::from(s.atomic_number).min(103)] += 1;
        }
        let g = counts.iter().fold(0, |acc, &c| gcd(acc, c)).max(1);
        let mut order: Vec<usize> = Vec::new();
        let has_carbon = counts[6] > 0;
        if has_carbon {
            order.push(6);
            if counts[1] > 0 {
                order.push(1);
            }
        }
        let mut rest: Vec<usize> = (1..=103)
            .filter(|&z| counts[z] > 0 && !(has_carbon && (z == 6 || z == 1)))
            .collect();
        rest.sort_by_key(|&z| elements::SYMBOLS[z - 1]);
        order.extend(rest);
        order
            .into_iter()
            .map(|z| {
                let n = counts[z] / g;
                if n == 1 {
                    elements::SYMBOLS[z - 1].to_string()
                } else {
                    format!("{}{}", elements::SYMBOLS[z - 1], n)
                }
            })
            .collect()
    }
}

pub(crate) fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    /// Validates `r·rᵀ = I` and `det r = +1` within 1e-9.
    pub fn new(r: Mat3) -> Result<Self> {
        let ortho = (r * r.transpose() - Mat3::identity()).abs().max();
        if !(ortho <= 1e-9) {
            return Err(CrystalError::InvalidRotation(format!(
                "|R·Rᵀ − I| = {ortho:e}"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(CrystalError::InvalidRotation(format!("det = {det}")));
        }
        Ok(Self(r))
    }

    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Rotation by `angle` radians about `axis` (right-handed).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let rot =
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self(*rot.matrix())
    }

    /// Rotation from a (not necessarily normalised) quaternion `w + xi + yj + zk`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Self(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `self · other` (apply `other` first).
    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }
}
