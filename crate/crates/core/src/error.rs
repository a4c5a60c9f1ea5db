use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    Contract(String),
    #[error("invalid config: `{key}` must satisfy {constraint}")]
    Config { key: String, constraint: String },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("non-finite loss at step {step}: total={total} dist={dist} sparse={sparse}")]
    NonFiniteLoss {
        step: usize,
        total: f64,
        dist: f64,
        sparse: f64,
    },
    #[error("unknown perturbation id `{0}`")]
    UnknownId(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(key: impl Into<String>, constraint: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        constraint: constraint.into(),
    }
}
