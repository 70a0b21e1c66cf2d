//! Cartesian-encoded crystal graph network for anisotropic displacement
//! parameters (ADPs).
//!
//! The crate covers the whole pipeline:
//!
//! * [`crystal`]: cell geometry, ADP tensors and their basis conversions.
//! * [`cif`]: a practical CIF reader, symmetry expansion, curation filters,
//!   the JSON-lines dataset format and grouped splits.
//! * [`graph`]: radius graphs under periodic boundary conditions.
//! * [`kernels`]: the small set of differentiable primitives the network uses.
//! * [`model`]: the network itself (encoders, message-passing layers, heads).
//! * [`augment`]: SO(3) augmentation and the rotation-consistency harness.
//! * [`metrics`]: MAE, S12 and voxelised IoU plus evaluation reports.
//! * [`train`]: L1 training with gradient accumulation, Adam and OneCycle.

pub mod augment;
pub mod cif;
pub mod crystal;
pub mod elements;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod train;

pub use crate::crystal::{
    AdpTensor, AtomSite, CrystalStructure, LatticeCell, Mat3, Rotation, Vec3,
};
pub use crate::error::{Error, Result};
pub use crate::graph::CrystalGraph;
