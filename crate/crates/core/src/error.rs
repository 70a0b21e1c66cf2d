use thiserror::Error;

use crate::cif::CifError;
use crate::crystal::CrystalError;
use crate::graph::GraphError;
use crate::kernels::KernelError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::train::TrainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(transparent)]
    Cif(#[from] CifError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
