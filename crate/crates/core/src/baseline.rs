//! Classical propensity-score estimation: full-support or fixed-support
//! maximum likelihood, the inverse-probability-weighted point estimate and
//! its Taylor-linearization variance.

use nalgebra::{Cholesky, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    clamp_events, link_logistic, log_likelihood_at, logit, propensities, Dataset, ModelIndicator,
    PropensityParams, PROB_CLAMP,
};
use crate::report::{failure_key, EstimateReport, Method};

pub const MLE_MAX_ITER: usize = 100;
pub const MLE_TOL: f64 = 1e-8;
pub const MAX_CONDITION: f64 = 1e12;
const SEPARATION_EPS: f64 = 1e-8;
const MAX_HALVINGS: usize = 30;

/// Result of a Newton fit together with the work it took.
#[derive(Debug, Clone)]
pub struct MleFit {
    pub phi: PropensityParams,
    pub iterations: usize,
    pub clamp_events: usize,
}

/// Maximum likelihood fit of the logistic response model on the columns
/// selected by `support`; coefficients outside the support are zero.
pub fn fit_propensity_mle(data: &Dataset, support: &ModelIndicator) -> Result<PropensityParams> {
    fit_propensity_mle_traced(data, support).map(|f| f.phi)
}

pub fn fit_propensity_mle_traced(data: &Dataset, support: &ModelIndicator) -> Result<MleFit> {
    if support.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: support.len(),
        });
    }
    let active = support.active();
    let xa = data.x().select_columns(&active);
    let delta = data.delta();

    let mut phi = DVector::zeros(active.len());
    let r = data.respondents();
    if r == 0 {
        return Err(Error::NoRespondents);
    }
    if r == data.n() {
        // boundary solution: every fitted probability sits on the upper clamp
        phi[0] = logit(1.0 - PROB_CLAMP);
        return Ok(MleFit {
            phi: scatter(&phi, &active, data.dim()),
            iterations: 0,
            clamp_events: data.n(),
        });
    }
    phi[0] = logit(data.response_rate());

    let eval = |phi: &DVector<f64>| -> (DVector<f64>, f64) {
        let pi = (&xa * phi).map(link_logistic);
        let ll = log_likelihood_at(data, &pi);
        (pi, ll)
    };

    let (mut pi, mut ll) = eval(&phi);
    let mut residual = f64::INFINITY;
    for iter in 0..=MLE_MAX_ITER {
        let s = xa.tr_mul(&(delta - &pi));
        residual = s.amax();
        if residual < MLE_TOL {
            if pi
                .iter()
                .any(|&p| p < SEPARATION_EPS || p > 1.0 - SEPARATION_EPS)
            {
                // fitted probabilities numerically 0 or 1: the data are separated
                return Err(Error::NoConvergence {
                    iterations: iter,
                    residual,
                });
            }
            return Ok(MleFit {
                phi: scatter(&phi, &active, data.dim()),
                iterations: iter,
                clamp_events: clamp_events(&pi),
            });
        }
        if iter == MLE_MAX_ITER {
            break;
        }
        let w = pi.map(|p| p * (1.0 - p));
        let info = linalg::weighted_gram(&xa, &w);
        let condition = linalg::condition_number(&info);
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularInformation { condition });
        }
        let step = Cholesky::new(info)
            .ok_or(Error::SingularInformation { condition })?
            .solve(&s);

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &phi + &step * t;
            let (cpi, cll) = eval(&cand);
            if cll >= ll - 1e-12 * ll.abs() {
                phi = cand;
                pi = cpi;
                ll = cll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(Error::NoConvergence {
        iterations: MLE_MAX_ITER,
        residual,
    })
}

/// Expands coefficients on `active` columns into a length-`d` vector.
pub(crate) fn scatter(values: &DVector<f64>, active: &[usize], d: usize) -> PropensityParams {
    let mut full = DVector::zeros(d);
    for (k, &j) in active.iter().enumerate() {
        full[j] = values[k];
    }
    PropensityParams(full)
}

/// Closed-form solution of `sum_i delta_i / pi_i (y_i - theta) = 0`.
pub fn ps_point_estimate(data: &Dataset, phi: &PropensityParams) -> Result<f64> {
    let pi = propensities(data, phi)?;
    ipw_mean(data, &pi)
}

/// IPW mean `sum delta y / pi / sum delta / pi` for given propensities.
pub fn ipw_mean(data: &Dataset, pi: &DVector<f64>) -> Result<f64> {
    if data.respondents() == 0 {
        return Err(Error::NoRespondents);
    }
    let (num, den) = ipw_sums(data, pi);
    Ok(num / den)
}

/// `(sum delta y / pi, sum delta / pi)`.
pub(crate) fn ipw_sums(data: &Dataset, pi: &DVector<f64>) -> (f64, f64) {
    data.delta()
        .iter()
        .zip(data.y_obs().iter())
        .zip(pi.iter())
        .fold((0.0, 0.0), |(num, den), ((&d, &y), &p)| {
            (num + d * y / p, den + d / p)
        })
}

/// Sandwich variance of the PS estimator with the response model fitted on `support`.
///
/// `V = D^-2 [ n^-1 sum u_i^2 + C A^-1 C' ] / n` with
/// `A = -n^-1 sum pi(1-pi) x x'`, `C = -n^-1 sum delta/pi (1-pi)(y-theta) x'`,
/// `D = -n^-1 sum delta/pi` and `u_i = delta_i/pi_i (y_i - theta)`.
pub fn ps_variance_taylor(
    data: &Dataset,
    phi: &PropensityParams,
    support: &ModelIndicator,
    theta: f64,
) -> Result<f64> {
    let pi = propensities(data, phi)?;
    let n = data.n() as f64;
    let active = support.active();
    let xa = data.x().select_columns(&active);
    let delta = data.delta();
    let y = data.y_obs();

    let mut d_hat = 0.0;
    let mut uu = 0.0;
    let mut c_weights = DVector::zeros(data.n());
    for i in 0..data.n() {
        let wi = delta[i] / pi[i];
        let resid = y[i] - theta;
        d_hat -= wi;
        uu += (wi * resid).powi(2);
        c_weights[i] = -wi * (1.0 - pi[i]) * resid;
    }
    d_hat /= n;
    uu /= n;
    let c_hat = xa.tr_mul(&c_weights) / n;

    // -A is the per-unit information, positive definite on a non-separated support.
    let neg_a = linalg::weighted_gram(&xa, &pi.map(|p| p * (1.0 - p))) / n;
    let condition = linalg::condition_number(&neg_a);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularInformation { condition });
    }
    let chol = Cholesky::new(neg_a).ok_or(Error::SingularInformation { condition })?;
    let cac = -c_hat.dot(&chol.solve(&c_hat));

    let v = (uu + cac) / (d_hat * d_hat) / n;
    Ok(v.max(0.0))
}

/// Full PS pipeline on a fixed support: MLE, point estimate, Taylor variance, Wald CI.
pub fn estimate_ps(data: &Dataset, support: &ModelIndicator, method: Method) -> EstimateReport {
    let run = || -> Result<EstimateReport> {
        let fit = fit_propensity_mle_traced(data, support)?;
        let theta = ps_point_estimate(data, &fit.phi)?;
        let var = ps_variance_taylor(data, &fit.phi, support, theta)?;
        let mut report = EstimateReport::wald(method, theta, var.sqrt());
        report
            .diagnostics
            .insert("newton_iterations".into(), fit.iterations as u64);
        report
            .diagnostics
            .insert("clamp_events".into(), fit.clamp_events as u64);
        Ok(report)
    };
    run().unwrap_or_else(|e| EstimateReport::failed(method, failure_key(&e)))
}
