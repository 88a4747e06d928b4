//! Data model and the logistic response-propensity model.
//!
//! Every estimator in the crate works on a [`Dataset`]: a covariate matrix
//! whose first column is the intercept, an outcome that is observed only
//! where `delta = 1`, and the response indicators themselves. The response
//! probability is `pi(x) = G(x'phi)` with `G` the logistic CDF.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Lower clamp applied to every response probability; the upper clamp is `1 - PROB_CLAMP`.
pub const PROB_CLAMP: f64 = 1e-12;

/// Observed sample `(x_i, y_i, delta_i)`.
///
/// Outcomes for non-respondents are not stored; `y_obs[i]` is `0.0` wherever
/// `delta[i] = 0`, so every respondent-weighted sum can be written without
/// branching on the indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y_obs: DVector<f64>,
    delta: DVector<f64>,
    respondents: usize,
}

impl Dataset {
    /// Builds a dataset from a covariate matrix that already carries the
    /// intercept column.
    pub fn new(x: DMatrix<f64>, y: Vec<Option<f64>>, delta: Vec<bool>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || x.ncols() == 0 {
            return Err(Error::InvalidData("need n >= 1 and d >= 1".into()));
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        if delta.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: delta.len(),
            });
        }
        if let Some(i) = (0..n).find(|&i| x[(i, 0)] != 1.0) {
            return Err(Error::InvalidData(format!(
                "row {i}: intercept column must be 1"
            )));
        }
        if let Some((i, _)) = x
            .row_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidData(format!("row {i}: non-finite covariate")));
        }
        let mut y_obs = DVector::zeros(n);
        for (i, (yi, &di)) in y.iter().zip(&delta).enumerate() {
            if di {
                match yi {
                    Some(v) if v.is_finite() => y_obs[i] = *v,
                    _ => {
                        return Err(Error::InvalidData(format!(
                            "row {i}: respondent without a finite outcome"
                        )))
                    }
                }
            }
        }
        let respondents = delta.iter().filter(|&&d| d).count();
        let delta = DVector::from_iterator(n, delta.iter().map(|&d| if d { 1.0 } else { 0.0 }));
        Ok(Self {
            x,
            y_obs,
            delta,
            respondents,
        })
    }

    /// Builds a dataset from covariates without the intercept; a column of
    /// ones is prepended.
    pub fn with_intercept(
        covariates: &DMatrix<f64>,
        y: Vec<Option<f64>>,
        delta: Vec<bool>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        let mut x = DMatrix::from_element(n, covariates.ncols() + 1, 1.0);
        x.columns_mut(1, covariates.ncols()).copy_from(covariates);
        Self::new(x, y, delta)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of columns including the intercept.
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.x.row(i).transpose()
    }

    /// Outcome vector with zeros at non-respondents.
    pub fn y_obs(&self) -> &DVector<f64> {
        &self.y_obs
    }

    pub fn y(&self, i: usize) -> Option<f64> {
        self.responded(i).then(|| self.y_obs[i])
    }

    /// Response indicators as 0.0 / 1.0.
    pub fn delta(&self) -> &DVector<f64> {
        &self.delta
    }

    pub fn responded(&self, i: usize) -> bool {
        self.delta[i] == 1.0
    }

    pub fn respondents(&self) -> usize {
        self.respondents
    }

    pub fn response_rate(&self) -> f64 {
        self.respondents as f64 / self.n() as f64
    }

    /// Copy of the dataset restricted to the given rows (used for cross-validation folds).
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let x = self.x.select_rows(rows);
        let y_obs = self.y_obs.select_rows(rows);
        let delta = self.delta.select_rows(rows);
        let respondents = delta.iter().filter(|&&d| d == 1.0).count();
        Dataset {
            x,
            y_obs,
            delta,
            respondents,
        }
    }
}

/// Coefficients of the logistic response model, one per column of `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityParams(pub DVector<f64>);

impl PropensityParams {
    pub fn zeros(d: usize) -> Self {
        Self(DVector::zeros(d))
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(DVector::from_vec(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

impl std::ops::Index<usize> for PropensityParams {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// Inclusion indicator over the columns of `x`. Column 0 (the intercept) is
/// always included.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<bool>", into = "Vec<bool>")]
pub struct ModelIndicator(Vec<bool>);

impl ModelIndicator {
    /// Builds an indicator; the intercept entry is forced to `true`.
    pub fn new(mut z: Vec<bool>) -> Self {
        assert!(
            !z.is_empty(),
            "model indicator needs at least the intercept"
        );
        z[0] = true;
        Self(z)
    }

    pub fn all(d: usize) -> Self {
        Self::new(vec![true; d])
    }

    pub fn intercept_only(d: usize) -> Self {
        Self::new(vec![false; d])
    }

    /// Indicator with the intercept plus the listed columns.
    pub fn from_active(d: usize, active: &[usize]) -> Self {
        let mut z = vec![false; d];
        for &j in active {
            z[j] = true;
        }
        Self::new(z)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// Indices of included columns, ascending; always starts with 0.
    pub fn active(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(j, &on)| on.then_some(j))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// True if every column included in `other` is also included here.
    pub fn contains(&self, other: &ModelIndicator) -> bool {
        self.0.iter().zip(&other.0).all(|(&a, &b)| a || !b)
    }
}

impl TryFrom<Vec<bool>> for ModelIndicator {
    type Error = String;
    fn try_from(v: Vec<bool>) -> std::result::Result<Self, String> {
        if v.is_empty() {
            return Err("empty model indicator".into());
        }
        if !v[0] {
            return Err("intercept must be included".into());
        }
        Ok(Self(v))
    }
}

impl From<ModelIndicator> for Vec<bool> {
    fn from(z: ModelIndicator) -> Vec<bool> {
        z.0
    }
}

/// Hyperparameters for the spike-and-slab priors of the response model
/// (`nu0`, `nu1`, `w`), the working outcome model (`gamma0`, `gamma1`, `xi`)
/// and the inverse-gamma prior on the working-model error variance (`c1`, `c2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub nu0: f64,
    pub nu1: f64,
    pub w: Vec<f64>,
    pub xi: Vec<f64>,
    pub gamma0: f64,
    pub gamma1: f64,
    pub c1: f64,
    pub c2: f64,
}

impl PriorConfig {
    /// Non-informative defaults: `nu0 = gamma0 = 1e-4`, `nu1 = gamma1 = 1e4`,
    /// `w = xi = 0.5`, `c1 = c2 = 1e-7`.
    pub fn default_for(d: usize) -> Self {
        Self {
            nu0: 1e-4,
            nu1: 1e4,
            w: vec![0.5; d],
            xi: vec![0.5; d],
            gamma0: 1e-4,
            gamma1: 1e4,
            c1: 1e-7,
            c2: 1e-7,
        }
    }

    /// Same prior with scalar mixing weights broadcast to `d` coordinates.
    pub fn broadcast(
        d: usize,
        nu0: f64,
        nu1: f64,
        w: f64,
        gamma0: f64,
        gamma1: f64,
        xi: f64,
    ) -> Self {
        Self {
            nu0,
            nu1,
            w: vec![w; d],
            xi: vec![xi; d],
            gamma0,
            gamma1,
            ..Self::default_for(d)
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPrior(m.to_string()));
        if self.w.len() != d || self.xi.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.w.len().min(self.xi.len()),
            });
        }
        if !(self.nu0 > 0.0 && self.nu1 > self.nu0 && self.nu1.is_finite()) {
            return bad("need 0 < nu0 < nu1");
        }
        if !(self.gamma0 > 0.0 && self.gamma1 > self.gamma0 && self.gamma1.is_finite()) {
            return bad("need 0 < gamma0 < gamma1");
        }
        if self
            .w
            .iter()
            .chain(&self.xi)
            .any(|&p| !(p > 0.0 && p < 1.0))
        {
            return bad("mixing weights must lie in (0, 1)");
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return bad("inverse-gamma parameters must be positive");
        }
        Ok(())
    }

    /// Prior variance of each response coefficient under model `z`.
    pub fn phi_prior_variances(&self, z: &ModelIndicator) -> DVector<f64> {
        DVector::from_iterator(
            z.len(),
            z.as_slice()
                .iter()
                .map(|&on| if on { self.nu1 } else { self.nu0 }),
        )
    }

    /// Prior variance of each working-model coefficient under model `u`.
    pub fn beta_prior_variances(&self, u: &ModelIndicator) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.as_slice()
                .iter()
                .map(|&on| if on { self.gamma1 } else { self.gamma0 }),
        )
    }
}

/// Logistic CDF, clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn link_logistic(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Log-odds of `p`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_dim(data: &Dataset, phi: &PropensityParams) -> Result<()> {
    if phi.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: phi.len(),
        });
    }
    Ok(())
}

pub fn propensity(x_row: &DVector<f64>, phi: &PropensityParams) -> Result<f64> {
    if x_row.len() != phi.len() {
        return Err(Error::DimensionMismatch {
            expected: x_row.len(),
            got: phi.len(),
        });
    }
    Ok(link_logistic(x_row.dot(&phi.0)))
}

/// Response probabilities for every row.
pub fn propensities(data: &Dataset, phi: &PropensityParams) -> Result<DVector<f64>> {
    check_dim(data, phi)?;
    Ok((data.x() * &phi.0).map(link_logistic))
}

/// Number of rows whose probability sits on the clamp.
pub fn clamp_events(pi: &DVector<f64>) -> usize {
    pi.iter()
        .filter(|&&p| p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP)
        .count()
}

pub fn log_likelihood(data: &Dataset, phi: &PropensityParams) -> Result<f64> {
    let pi = propensities(data, phi)?;
    Ok(log_likelihood_at(data, &pi))
}

pub(crate) fn log_likelihood_at(data: &Dataset, pi: &DVector<f64>) -> f64 {
    data.delta()
        .iter()
        .zip(pi.iter())
        .map(|(&d, &p)| if d == 1.0 { p.ln() } else { (1.0 - p).ln() })
        .sum()
}

/// `sum_i (delta_i - pi_i) x_i`, the gradient of [`log_likelihood`].
pub fn score(data: &Dataset, phi: &PropensityParams) -> Result<DVector<f64>> {
    let pi = propensities(data, phi)?;
    Ok(score_at(data, &pi))
}

pub(crate) fn score_at(data: &Dataset, pi: &DVector<f64>) -> DVector<f64> {
    data.x().tr_mul(&(data.delta() - pi))
}

/// Per-unit Fisher information `n^-1 sum_i pi_i (1 - pi_i) x_i x_i'`.
pub fn fisher_info(data: &Dataset, phi: &PropensityParams) -> Result<DMatrix<f64>> {
    let pi = propensities(data, phi)?;
    Ok(information_at(data, &pi) / data.n() as f64)
}

/// Unnormalized information `sum_i pi_i (1 - pi_i) x_i x_i'`.
pub(crate) fn information_at(data: &Dataset, pi: &DVector<f64>) -> DMatrix<f64> {
    let w = pi.map(|p| p * (1.0 - p));
    linalg::weighted_gram(data.x(), &w)
}
