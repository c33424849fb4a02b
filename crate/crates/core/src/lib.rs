//! Mixture-of-experts models with soft-max gating, fitted by blockwise
//! minorization-maximization of the log quasi-likelihood.
//!
//! The crate covers Gaussian, logistic, Poisson and multinomial experts,
//! BIC-based choice of the number of components, sandwich covariance
//! estimates, plug-in prediction tasks and seeded synthetic generators.

pub mod datagen;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod model;
pub mod numeric;
pub mod selection;
pub mod tasks;

pub use error::{MoeError, Result};
pub use estimation::{
    best_start, fit, fit_starts, initialize, multi_start_fit, FitConfig, FitResult,
};
pub use model::{
    Dataset, ExpertDesign, ExpertParams, Family, GatingParams, MoeParams, Response, ResponseKind,
    Responsibilities,
};
pub use selection::{select_g, SelectionReport, SelectionRow};
