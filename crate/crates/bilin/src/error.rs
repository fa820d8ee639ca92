use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("trajectory left the finite range at t = {0}")]
    NonFinite(f64),
    #[error("bad input range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error("data matrix W0 lacks full row rank (sigma_min = {0:.3e})")]
    RankDeficient(f64),
    #[error("noise bound is inconsistent with the data (min eigenvalue of Q = {0:.3e})")]
    InconsistentNoise(f64),
    #[error("upsilon has spectral norm {0} > 1")]
    UpsilonTooLarge(f64),
    #[error("Q is zero: the consistency set is a singleton")]
    QZero,
    #[error("SDP solver failure: {0}")]
    SolverFailure(String),
    #[error("eta must lie in (0, 1), got {0}")]
    BadEta(f64),
    #[error("s = {s} violates s <= -eps/eta = {bound}")]
    BadS { s: f64, bound: f64 },
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("no grid point is feasible")]
    AllInfeasible,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
