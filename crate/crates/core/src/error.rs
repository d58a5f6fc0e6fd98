use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}, column {column} ({field}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        field: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no SNPs left after filtering (maf_min = {maf_min}, miss_max = {miss_max})")]
    EmptyPanel { maf_min: f64, miss_max: f64 },

    #[error("all {0} SNP columns are monomorphic")]
    AllMonomorphic(usize),

    #[error("subject {subject} (index {index}) has zero degree in the weight graph")]
    IsolatedVertex { index: usize, subject: String },

    #[error("subjects {0} and {1} share no jointly non-missing SNPs")]
    NoSharedSnps(usize, usize),

    #[error("matrix is not symmetric: max |a_ij - a_ji| = {0:e}")]
    NotSymmetric(f64),

    #[error("eigendecomposition failed: {0}")]
    NonConvergence(String),

    #[error("requested dimension {requested} exceeds the {available} nonzero kernel eigenvalues")]
    RankExceeded { requested: usize, available: usize },

    #[error("kernel is not positive semi-definite: squared distance {0:e} between subjects")]
    NotPsd(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("outcome is constant; logistic model is not identifiable")]
    ConstantOutcome,

    #[error("no informative strata: {0}")]
    Uninformative(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Failures of the numerical machinery, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::IsolatedVertex { .. }
            | Error::NotSymmetric(_)
            | Error::NonConvergence(_)
            | Error::RankExceeded { .. }
            | Error::NotPsd(_)
            | Error::NonFinite(_)
            | Error::Uninformative(_) => true,
            Error::Stage { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
