use std::path::PathBuf;

use thiserror::Error;

use crate::moreau::MoreauSplit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected} values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix not positive definite at row {index} (pivot {pivot:e}); discretization is broken")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("singular system at pivot {index}")]
    Singular { index: usize },

    #[error("invalid potential: {0}")]
    InvalidPotential(String),

    #[error("invalid nonlinearity: {0}")]
    InvalidModel(String),

    #[error("load must be nonnegative and not identically zero")]
    ZeroLoad,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error(
        "cone projection did not certify after {iterations} iterations \
         (kkt violation {kkt:e}, complementarity {compl:e})",
        kkt = best.kkt_violation,
        compl = best.compl_violation
    )]
    QpBudgetExhausted {
        iterations: usize,
        best: Box<MoreauSplit>,
    },

    #[error("invalid flow configuration: {0}")]
    InvalidFlowConfig(String),

    #[error("ray direction is zero")]
    ZeroDirection,

    #[error("ray never reached negative energy; energies along the ray (scale, I): {energies:?}")]
    BracketFailure { energies: Vec<(f64, f64)> },

    #[error("bracket invariant broken at scale {scale}: {detail}")]
    BracketBroken { scale: f64, detail: String },

    #[error("trajectory undetermined inside bracket [{low}, {high}]; enlarge the step budget")]
    Undetermined { low: f64, high: f64 },

    #[error("bisection endpoint failed certification: {0}")]
    Certification(String),

    #[error("nodal search failed: {0}")]
    NodalSearch(String),

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}
