//! L1-penalized logistic regression for the response model.
//!
//! Minimizes `-l_n(phi) + lambda * sum_{j>=1} |phi_j|` (intercept unpenalized)
//! by iteratively reweighted least squares with an inner cyclic
//! coordinate-descent solver, warm-started along a decreasing penalty path.
//! The penalty is chosen by stratified K-fold cross-validation on held-out
//! deviance.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::baseline::estimate_ps;
use crate::error::{Error, Result};
use crate::model::{
    link_logistic, log_likelihood_at, logit, score_at, Dataset, ModelIndicator, PropensityParams,
};
use crate::report::{EstimateReport, Method};

pub const MAX_SWEEPS: usize = 10_000;
const TOL: f64 = 1e-8;
const MIN_WEIGHT: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub phi: PropensityParams,
    pub support: ModelIndicator,
    pub lambda: f64,
    /// Mean held-out deviance for each leading penalty that converged in every fold.
    pub cv_deviance: Vec<f64>,
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Intercept-only starting point `(logit(rate), 0, ..., 0)`.
fn null_fit(data: &Dataset) -> DVector<f64> {
    let mut phi = DVector::zeros(data.dim());
    let rate = data.response_rate().clamp(1e-6, 1.0 - 1e-6);
    phi[0] = logit(rate);
    phi
}

/// Smallest penalty at which every penalized coefficient is zero.
pub fn lambda_max(data: &Dataset) -> f64 {
    let phi0 = null_fit(data);
    let pi = (data.x() * &phi0).map(link_logistic);
    let s = score_at(data, &pi);
    s.iter().skip(1).fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `count` log-spaced penalties from `lambda_max` down to `ratio * lambda_max`.
pub fn default_lambda_grid(data: &Dataset, count: usize, ratio: f64) -> Vec<f64> {
    let hi = lambda_max(data).max(1e-12);
    let lo = hi * ratio;
    if count == 1 {
        return vec![hi];
    }
    (0..count)
        .map(|k| (hi.ln() + (lo.ln() - hi.ln()) * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Penalized fit at a single `lambda`, warm-started from `start`.
///
/// Returns the coefficients and the number of coordinate sweeps used.
pub fn fit_at_lambda(
    data: &Dataset,
    lambda: f64,
    start: &DVector<f64>,
) -> Result<(DVector<f64>, usize)> {
    let n = data.n();
    let d = data.dim();
    let x = data.x();
    let delta = data.delta();
    let mut phi = start.clone();
    let mut sweeps = 0usize;
    let col_sq: Vec<DVector<f64>> = (0..d).map(|j| x.column(j).map(|v| v * v)).collect();

    loop {
        let eta = x * &phi;
        let pi = eta.map(link_logistic);
        let w = pi.map(|p| (p * (1.0 - p)).max(MIN_WEIGHT));
        // working response z = eta + (delta - pi) / w; keep the residual r = z - eta
        let mut r = DVector::from_iterator(n, (0..n).map(|i| (delta[i] - pi[i]) / w[i]));
        let old = phi.clone();

        // one coordinate update; returns the scaled change
        let update = |j: usize, phi: &mut DVector<f64>, r: &mut DVector<f64>| -> f64 {
            let xj = x.column(j);
            let denom = w.dot(&col_sq[j]);
            if denom <= 0.0 {
                return 0.0;
            }
            let mut num = 0.0;
            for i in 0..n {
                num += w[i] * xj[i] * r[i];
            }
            num += denom * phi[j];
            let new = if j == 0 {
                num / denom
            } else {
                soft_threshold(num, lambda) / denom
            };
            let change = new - phi[j];
            if change != 0.0 {
                r.axpy(-change, &xj, 1.0);
                phi[j] = new;
            }
            change.abs() * denom.sqrt()
        };

        // full sweeps until one moves nothing by more than TOL; in between,
        // cycle over the active set only
        loop {
            sweeps += 1;
            if sweeps > MAX_SWEEPS {
                return Err(Error::NoConvergence {
                    iterations: MAX_SWEEPS,
                    residual: (&phi - &old).amax(),
                });
            }
            let mut max_change = 0.0f64;
            for j in 0..d {
                max_change = max_change.max(update(j, &mut phi, &mut r));
            }
            if max_change < TOL {
                break;
            }
            let active: Vec<usize> = (0..d).filter(|&j| phi[j] != 0.0 || j == 0).collect();
            loop {
                sweeps += 1;
                if sweeps > MAX_SWEEPS {
                    return Err(Error::NoConvergence {
                        iterations: MAX_SWEEPS,
                        residual: (&phi - &old).amax(),
                    });
                }
                let mut inner = 0.0f64;
                for &j in &active {
                    inner = inner.max(update(j, &mut phi, &mut r));
                }
                if inner < TOL {
                    break;
                }
            }
        }
        let outer_change = (&phi - &old).amax();
        if outer_change < TOL * 10.0 {
            return Ok((phi, sweeps));
        }
    }
}

/// Training deviance `-2 l_n(phi)`.
pub fn deviance(data: &Dataset, phi: &DVector<f64>) -> f64 {
    let pi = (data.x() * phi).map(link_logistic);
    -2.0 * log_likelihood_at(data, &pi)
}

/// Fits the whole penalty path with warm starts.
pub fn lasso_path(data: &Dataset, lambda_grid: &[f64]) -> Result<Vec<DVector<f64>>> {
    let (path, err) = truncated_path(data, lambda_grid);
    match err {
        Some(e) => Err(e),
        None => Ok(path),
    }
}

/// Warm-started path that stops at the first penalty whose fit does not
/// converge; returns the fits before it and that error.
pub fn truncated_path(data: &Dataset, lambda_grid: &[f64]) -> (Vec<DVector<f64>>, Option<Error>) {
    let mut start = null_fit(data);
    let mut out = Vec::with_capacity(lambda_grid.len());
    for &lam in lambda_grid {
        match fit_at_lambda(data, lam, &start) {
            Ok((phi, _)) => start = phi,
            Err(e) => return (out, Some(e)),
        }
        out.push(start.clone());
    }
    (out, None)
}

/// Stratified round-robin fold labels: respondents and non-respondents are
/// shuffled separately and dealt to folds in turn.
pub fn stratified_folds<R: Rng + ?Sized>(data: &Dataset, folds: usize, rng: &mut R) -> Vec<usize> {
    let mut labels = vec![0; data.n()];
    let mut resp: Vec<usize> = (0..data.n()).filter(|&i| data.responded(i)).collect();
    let mut nonresp: Vec<usize> = (0..data.n()).filter(|&i| !data.responded(i)).collect();
    resp.shuffle(rng);
    nonresp.shuffle(rng);
    for (k, &i) in resp.iter().chain(nonresp.iter()).enumerate() {
        labels[i] = k % folds;
    }
    labels
}

fn validate_grid(lambda_grid: &[f64], folds: usize) -> Result<()> {
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("empty penalty grid".into()));
    }
    if lambda_grid.windows(2).any(|w| w[1] >= w[0]) || lambda_grid.iter().any(|&l| !(l >= 0.0)) {
        return Err(Error::InvalidArgument(
            "penalty grid must be nonnegative and strictly decreasing".into(),
        ));
    }
    Ok(())
}

/// Cross-validated L1-penalized fit of the response model.
pub fn fit_lasso_logistic<R: Rng + ?Sized>(
    data: &Dataset,
    lambda_grid: &[f64],
    folds: usize,
    rng: &mut R,
) -> Result<LassoFit> {
    validate_grid(lambda_grid, folds)?;
    let labels = stratified_folds(data, folds, rng);
    // penalties past a fold's first failure are not candidates
    let mut cv = vec![0.0; lambda_grid.len()];
    let mut usable = lambda_grid.len();
    let mut first_err = None;
    for k in 0..folds {
        let train: Vec<usize> = (0..data.n()).filter(|&i| labels[i] != k).collect();
        let test: Vec<usize> = (0..data.n()).filter(|&i| labels[i] == k).collect();
        if test.is_empty() {
            continue;
        }
        let train = data.subset(&train);
        let test = data.subset(&test);
        let (path, err) = truncated_path(&train, &lambda_grid[..usable]);
        if err.is_some() && first_err.is_none() {
            first_err = err;
        }
        usable = path.len();
        for (acc, phi) in cv.iter_mut().zip(&path) {
            *acc += deviance(&test, phi);
        }
    }
    if usable == 0 {
        return Err(first_err.expect("an empty path comes with an error"));
    }
    cv.truncate(usable);
    for v in cv.iter_mut() {
        *v /= folds as f64;
    }
    let best = cv
        .iter()
        .enumerate()
        .fold(
            (0, f64::INFINITY),
            |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) },
        )
        .0;
    let path = lasso_path(data, &lambda_grid[..=best])?;
    let phi = path.into_iter().last().expect("grid is nonempty");
    let support = ModelIndicator::new(phi.iter().map(|&v| v != 0.0).collect());
    Ok(LassoFit {
        phi: PropensityParams(phi),
        support,
        lambda: lambda_grid[best],
        cv_deviance: cv,
    })
}

/// LASSO selection followed by a PS refit on the selected support.
pub fn estimate_lasso<R: Rng + ?Sized>(
    data: &Dataset,
    folds: usize,
    rng: &mut R,
) -> EstimateReport {
    let grid = default_lambda_grid(data, 50, 1e-3);
    match fit_lasso_logistic(data, &grid, folds, rng) {
        Ok(fit) => {
            let mut report = estimate_ps(data, &fit.support, Method::Lasso);
            if fit.support.count() == 1 {
                report
                    .diagnostics
                    .insert("intercept_only_support".into(), 1);
            }
            report.selected_support = Some(fit.support);
            report
        }
        Err(e) => EstimateReport::failed(Method::Lasso, crate::report::failure_key(&e)),
    }
}
