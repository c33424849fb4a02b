use thiserror::Error;

/// Errors raised by model evaluation, estimation, selection and inference.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum MoeError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("response kind {response} does not match expert family {family}")]
    KindMismatch { response: String, family: String },

    #[error("expert variance must be positive, got {0}")]
    InvalidVariance(f64),

    #[error("invalid response: {0}")]
    InvalidResponse(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("rank-deficient design in {context}; remove constant or collinear covariate columns")]
    RankDeficient { context: String },

    #[error("component {component} is starved: total responsibility {mass:e} below threshold")]
    EmptyComponent { component: usize, mass: f64 },

    #[error("cannot initialize {g} components from {n} rows: need at least {needed}")]
    InfeasibleInit { n: usize, g: usize, needed: usize },

    #[error("fit failed in {block} at cycle {cycle}: {source}")]
    BlockFailed {
        block: String,
        cycle: usize,
        #[source]
        source: Box<MoeError>,
    },

    #[error("all {} starts failed: {}", .0.len(), .0.join("; "))]
    AllStartsFailed(Vec<String>),

    #[error("no eligible fit for selection: {}", .0.join("; "))]
    SelectionFailed(Vec<String>),

    #[error("information matrix is not invertible (condition number {condition:e}); the root may be non-isolated")]
    SingularInformation { condition: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, MoeError>;
