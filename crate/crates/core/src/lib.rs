//! Propensity-score estimation of a population mean when outcomes are missing
//! at random, with Bayesian spike-and-slab selection of the response model.
//!
//! Estimators:
//!
//! * [`baseline`]: maximum-likelihood PS weighting on a fixed support
//! * [`lasso`]: L1-penalized logistic selection followed by a PS refit
//! * [`bsps`]: Gibbs sampler over the response-model support, `phi` and `theta`
//! * [`obsps`]: BSPS augmented by a working outcome model and the calibrated
//!   estimating system in [`gmm`]
//!
//! [`simulation`] holds the data-generating processes and the Monte Carlo
//! driver; [`io`] reads and writes CSV.

pub mod baseline;
pub mod bsps;
pub mod error;
pub mod gmm;
pub mod io;
pub mod lasso;
pub mod linalg;
pub mod model;
pub mod obsps;
pub mod report;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
pub use model::{Dataset, ModelIndicator, PriorConfig, PropensityParams};
pub use report::{EstimateReport, Method};
