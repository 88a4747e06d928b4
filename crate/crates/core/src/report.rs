use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::ModelIndicator;

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    #[serde(alias = "ps")]
    Ps,
    #[serde(alias = "tps")]
    Tps,
    #[serde(alias = "lasso")]
    Lasso,
    #[serde(alias = "bsps")]
    Bsps,
    #[serde(alias = "obsps")]
    Obsps,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ps,
        Method::Tps,
        Method::Lasso,
        Method::Bsps,
        Method::Obsps,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ps => "PS",
            Method::Tps => "TPS",
            Method::Lasso => "LASSO",
            Method::Bsps => "BSPS",
            Method::Obsps => "OBSPS",
        }
    }

    /// Whether the method reports a selected support.
    pub fn selects(&self) -> bool {
        matches!(self, Method::Lasso | Method::Bsps | Method::Obsps)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ps" => Ok(Method::Ps),
            "tps" => Ok(Method::Tps),
            "lasso" => Ok(Method::Lasso),
            "bsps" => Ok(Method::Bsps),
            "obsps" => Ok(Method::Obsps),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

pub type Diagnostics = BTreeMap<String, u64>;

/// Point estimate, standard error and interval for `theta = E(Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub theta_hat: f64,
    pub se_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: Method,
    pub selected_support: Option<ModelIndicator>,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    /// Wald interval `theta +- z * se`.
    pub fn wald(method: Method, theta_hat: f64, se_hat: f64) -> Self {
        Self {
            theta_hat,
            se_hat,
            ci_low: theta_hat - Z_95 * se_hat,
            ci_high: theta_hat + Z_95 * se_hat,
            method,
            selected_support: None,
            converged: true,
            diagnostics: Diagnostics::new(),
        }
    }

    pub fn failed(method: Method, reason: &str) -> Self {
        let mut diagnostics = Diagnostics::new();
        diagnostics.insert(reason.to_string(), 1);
        Self {
            theta_hat: f64::NAN,
            se_hat: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            method,
            selected_support: None,
            converged: false,
            diagnostics,
        }
    }

    pub fn covers(&self, theta: f64) -> bool {
        self.converged && self.ci_low <= theta && theta <= self.ci_high
    }
}

/// Diagnostic key for an estimator error.
pub fn failure_key(err: &Error) -> &'static str {
    match err {
        Error::NoConvergence { .. } => "no_convergence",
        Error::SingularInformation { .. } => "singular_information",
        Error::NoRespondents => "no_respondents",
        Error::ChainFailure { .. } => "chain_failure",
        _ => "error",
    }
}
