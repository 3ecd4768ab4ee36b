use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("graph contains a cycle")]
    Cyclic,
    #[error("invalid node {node} for graph with {n} nodes")]
    InvalidNode { node: usize, n: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("not a permutation: {0:?}")]
    NotAPermutation(Vec<usize>),
    #[error("node set {0:?} is not ancestrally closed")]
    NotAncestrallyClosed(Vec<usize>),
    #[error("unsupported profile: {0}")]
    UnsupportedProfile(String),
    #[error("non-finite value at node {node} (Z{})", node + 1)]
    NonFinite { node: usize },
    #[error("{what} limited to n <= {max}, got n = {n}")]
    TooLarge { what: &'static str, n: usize, max: usize },
    #[error("finite-difference step {0:e} is too small")]
    StepUnderflow(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("environment {env} out of range (m = {m})")]
    EnvOutOfRange { env: usize, m: usize },
    #[error("non-finite loss at step {step}")]
    NumericalAbort { step: usize },
    #[error("malformed data: {0}")]
    Parse(String),
    #[error(transparent)]
    Autodiff(#[from] crl_autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
