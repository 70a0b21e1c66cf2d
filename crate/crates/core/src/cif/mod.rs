//! CIF ingestion: parsing, symmetry expansion, curation, dataset files and
//! grouped splits.

mod curate;
mod dataset;
mod parser;
mod split;
mod symop;

use thiserror::Error;

pub use self::curate::{
    curate, curate_with, ChemistryFilter, Curation, CurationCriteria, RejectCode, RejectReason,
};
pub use self::dataset::{
    read_dataset, read_dataset_str, write_dataset, write_dataset_tagged, StructureRecord,
};
pub use self::parser::{expand_symmetry, load_cif, parse_cif, ParsedBlock};
pub use self::split::{group_key, split_by_keys, split_dataset, DatasetSplit, DEFAULT_FRACTIONS};
pub use self::symop::{parse_symop, SymOp};

use crate::crystal::CrystalError;

#[derive(Debug, Error)]
pub enum CifError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("data block `{block}` is missing cell tag {tag}")]
    MissingCell { block: String, tag: String },
    #[error("data block `{block}` has no atom-site loop")]
    NoAtoms { block: String },
    #[error("unknown element for atom `{0}`")]
    UnknownElement(String),
    #[error("invalid symmetry operation `{op}`: {message}")]
    Symop { op: String, message: String },
    #[error("dataset line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("duplicate structure id `{0}`")]
    DuplicateId(String),
    #[error("invalid split fractions {0:?}")]
    InvalidFractions(Vec<f64>),
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
