use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("kernel row {row} has zero mass")]
    ZeroRow { row: usize },

    #[error(
        "kernel entry ({row}, {col}) = {value:e} is negative beyond tolerance; raise N or substeps"
    )]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("kernel invariant violated: {what} defect {defect:e} exceeds {tolerance:e}; raise N or substeps")]
    KernelInvariant {
        what: &'static str,
        defect: f64,
        tolerance: f64,
    },

    #[error("measure p charges node {node} where q vanishes")]
    NotAbsolutelyContinuous { node: usize },

    #[error("quadrature produced a non-finite value for {0}")]
    Quadrature(&'static str),

    #[error("kernel cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
