use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical degeneracy at node {node}: {detail}")]
    Degenerate { node: usize, detail: String },

    #[error("coefficient {name} = {value} exceeds declared bound {bound}")]
    Bound {
        name: &'static str,
        value: f64,
        bound: f64,
    },

    #[error("ill-conditioned regression at node {node} (condition number {condition:.3e})")]
    Conditioning { node: usize, condition: f64 },

    #[error("no convergence after {iterations} iterations (contraction ratios {ratios:?})")]
    Convergence { iterations: usize, ratios: Vec<f64> },

    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
