//! Bayesian sparse propensity-score sampler.
//!
//! Each Gibbs iteration draws
//!
//! 1. the model indicator `z | phi` coordinate-wise from the spike-and-slab
//!    mixture odds,
//! 2. `phi | z` from the Laplace approximation `N(mode, (n I + V_z^-1)^-1)`
//!    of the penalized likelihood,
//! 3. `theta | phi` from the conditional normal law of the scaled IPW
//!    estimating function given the response-model score.
//!
//! The penalized mode depends only on `(data, z)`, so the chain keeps a small
//! cache of Laplace fits keyed by the model indicator.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::Serialize;

use crate::baseline::ipw_sums;
use crate::error::{Error, Result};
use crate::lasso::{default_lambda_grid, fit_lasso_logistic};
use crate::linalg;
use crate::model::{
    information_at, link_logistic, log_likelihood_at, propensities, score_at, Dataset,
    ModelIndicator, PriorConfig, PropensityParams,
};
use crate::obsps::WorkingModelState;
use crate::report::{Diagnostics, EstimateReport, Method};
use crate::rng::SeedTree;

pub const MODE_MAX_ITER: usize = 200;
pub const MODE_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 30;
const CACHE_LIMIT: usize = 512;
const START_FOLDS: usize = 5;
// shorter path for the start: the saturated end is slow and never selected
const START_GRID: (usize, f64) = (30, 1e-2);
pub(crate) const START_STREAM: u64 = 1;

/// One Gibbs iterate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainState {
    pub z: ModelIndicator,
    pub phi: PropensityParams,
    pub theta: f64,
    /// Working outcome-model state, present for OBSPS chains.
    pub working: Option<WorkingModelState>,
}

/// Post burn-in draws of a chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSample {
    pub method: Method,
    pub draws: Vec<ChainState>,
    pub burn_in: usize,
    pub kept: usize,
    pub seed: u64,
    pub diagnostics: Diagnostics,
}

/// Chain lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub kept: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            burn_in: 2000,
            kept: 2000,
        }
    }
}

/// Log-odds of slab membership for a coefficient at `value`.
pub fn slab_log_odds(value: f64, weight: f64, spike_var: f64, slab_var: f64) -> f64 {
    // log w psi(v|0,slab) - log (1-w) psi(v|0,spike)
    (weight / (1.0 - weight)).ln()
        - 0.5 * (slab_var / spike_var).ln()
        - 0.5 * value * value * (1.0 / slab_var - 1.0 / spike_var)
}

/// Probability of slab membership, evaluated in log space.
pub fn inclusion_probability(value: f64, weight: f64, spike_var: f64, slab_var: f64) -> f64 {
    let lo = slab_log_odds(value, weight, spike_var, slab_var);
    if lo >= 0.0 {
        1.0 / (1.0 + (-lo).exp())
    } else {
        let e = lo.exp();
        e / (1.0 + e)
    }
}

/// Model step: independent Bernoulli draws of `z_j | phi_j` for `j >= 1`.
pub fn draw_model_step<R: Rng + ?Sized>(
    phi: &PropensityParams,
    priors: &PriorConfig,
    rng: &mut R,
) -> ModelIndicator {
    let z = (0..phi.len())
        .map(|j| {
            j == 0 || {
                let p = inclusion_probability(phi[j], priors.w[j], priors.nu0, priors.nu1);
                rng.random::<f64>() < p
            }
        })
        .collect();
    ModelIndicator::new(z)
}

/// Mode of the penalized log-likelihood and the Cholesky factor of the
/// negative Hessian `n I(mode) + V_z^-1` there.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub mode: DVector<f64>,
    pub precision: Cholesky<f64, Dyn>,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

impl LaplaceFit {
    pub fn covariance(&self) -> DMatrix<f64> {
        linalg::symmetrize(self.precision.inverse())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> PropensityParams {
        PropensityParams(linalg::mvn_from_precision(&self.mode, &self.precision, rng))
    }
}

fn prior_precision(z: &ModelIndicator, priors: &PriorConfig) -> DVector<f64> {
    priors.phi_prior_variances(z).map(|v| 1.0 / v)
}

/// Damped Newton ascent on `l_n(phi) - phi' V_z^-1 phi / 2` from `start`.
pub fn solve_penalized(
    data: &Dataset,
    z: &ModelIndicator,
    priors: &PriorConfig,
    start: &DVector<f64>,
) -> Result<LaplaceFit> {
    let d = data.dim();
    if z.len() != d || start.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: z.len().min(start.len()),
        });
    }
    let prec = prior_precision(z, priors);
    let objective = |phi: &DVector<f64>, pi: &DVector<f64>| -> f64 {
        log_likelihood_at(data, pi)
            - 0.5
                * phi
                    .iter()
                    .zip(prec.iter())
                    .map(|(v, p)| v * v * p)
                    .sum::<f64>()
    };

    let mut phi = start.clone();
    let mut pi = (data.x() * &phi).map(link_logistic);
    let mut f = objective(&phi, &pi);
    let mut iterations = 0;
    loop {
        let grad = score_at(data, &pi) - prec.component_mul(&phi);
        let residual = grad.amax();
        let mut h = information_at(data, &pi);
        for j in 0..d {
            h[(j, j)] += prec[j];
        }
        let chol = Cholesky::new(h).expect("penalized information is positive definite");
        if residual < MODE_TOL || iterations == MODE_MAX_ITER {
            return Ok(LaplaceFit {
                mode: phi,
                precision: chol,
                iterations,
                converged: residual < MODE_TOL,
                residual,
            });
        }
        iterations += 1;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &phi + &step * t;
            let cpi = (data.x() * &cand).map(link_logistic);
            let cf = objective(&cand, &cpi);
            if cf >= f - 1e-12 * f.abs() {
                phi = cand;
                pi = cpi;
                f = cf;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // the objective is flat to rounding at this point; report as is
            let grad = score_at(data, &pi) - prec.component_mul(&phi);
            let mut h = information_at(data, &pi);
            for j in 0..d {
                h[(j, j)] += prec[j];
            }
            let residual = grad.amax();
            return Ok(LaplaceFit {
                mode: phi,
                precision: Cholesky::new(h).expect("penalized information is positive definite"),
                iterations,
                converged: residual < MODE_TOL,
                residual,
            });
        }
    }
}

fn converged(fit: LaplaceFit) -> Result<LaplaceFit> {
    if fit.converged {
        Ok(fit)
    } else {
        Err(Error::NoConvergence {
            iterations: fit.iterations,
            residual: fit.residual,
        })
    }
}

/// Solves `S_n(phi) - V_z^-1 phi = 0`.
pub fn penalized_mode(
    data: &Dataset,
    z: &ModelIndicator,
    priors: &PriorConfig,
) -> Result<PropensityParams> {
    priors.validate(data.dim())?;
    let fit = converged(solve_penalized(
        data,
        z,
        priors,
        &DVector::zeros(data.dim()),
    )?)?;
    Ok(PropensityParams(fit.mode))
}

/// `(n I(phi_mode) + V_z^-1)^-1`.
pub fn laplace_covariance(
    data: &Dataset,
    phi_mode: &PropensityParams,
    z: &ModelIndicator,
    priors: &PriorConfig,
) -> Result<DMatrix<f64>> {
    let pi = propensities(data, phi_mode)?;
    let mut h = information_at(data, &pi);
    let prec = prior_precision(z, priors);
    for j in 0..data.dim() {
        h[(j, j)] += prec[j];
    }
    let inv = linalg::spd_inverse(&h).expect("penalized information is positive definite");
    Ok(inv)
}

/// Posterior step 2a: one draw of `phi | z` from the Laplace approximation.
pub fn draw_phi_step<R: Rng + ?Sized>(
    data: &Dataset,
    z: &ModelIndicator,
    priors: &PriorConfig,
    rng: &mut R,
) -> Result<PropensityParams> {
    let fit = converged(solve_penalized(
        data,
        z,
        priors,
        &DVector::zeros(data.dim()),
    )?)?;
    Ok(fit.draw(rng))
}

/// Conditional law of `v = n^-1/2 U_PS(theta, phi)` given the score on the
/// active coordinates, plus the sums that invert `v` back to `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaConditional {
    pub n: usize,
    /// `sum delta y / pi`
    pub weighted_total: f64,
    /// `sum delta / pi`
    pub weight_sum: f64,
    pub mean: f64,
    pub variance: f64,
    pub pseudo_inverse_used: bool,
}

impl ThetaConditional {
    /// Solves `n^-1/2 sum delta/pi (y - theta) = v` for `theta`.
    pub fn theta_for(&self, v: f64) -> f64 {
        (self.weighted_total - (self.n as f64).sqrt() * v) / self.weight_sum
    }

    /// `n^-1/2 U_PS(theta)`.
    pub fn scaled_estimating_function(&self, theta: f64) -> f64 {
        (self.weighted_total - theta * self.weight_sum) / (self.n as f64).sqrt()
    }

    pub fn point_estimate(&self) -> f64 {
        self.weighted_total / self.weight_sum
    }
}

/// Builds the plug-in conditional normal for the `theta` step.
///
/// The joint covariance of `(s_i, u_i)` is restricted to the intercept and
/// the coordinates included in `active`.
pub fn theta_conditional(
    data: &Dataset,
    phi: &PropensityParams,
    active: &ModelIndicator,
) -> Result<ThetaConditional> {
    if data.respondents() == 0 {
        return Err(Error::NoRespondents);
    }
    if active.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: active.len(),
        });
    }
    let pi = propensities(data, phi)?;
    let (weighted_total, weight_sum) = ipw_sums(data, &pi);
    let theta_tilde = weighted_total / weight_sum;
    let n = data.n();
    let nf = n as f64;

    let idx = active.active();
    let xa = data.x().select_columns(&idx);
    let delta = data.delta();
    let y = data.y_obs();
    let resid = delta - &pi;
    let u = DVector::from_iterator(n, (0..n).map(|i| delta[i] / pi[i] * (y[i] - theta_tilde)));

    let s11 = linalg::weighted_gram(&xa, &resid.map(|r| r * r)) / nf;
    let s12 = xa.tr_mul(&resid.component_mul(&u)) / nf;
    let s22 = u.norm_squared() / nf;
    let score = xa.tr_mul(&resid);

    let (k, pseudo_inverse_used) = match Cholesky::new(s11.clone()) {
        Some(c) => (c.solve(&s12), false),
        None => (linalg::sym_pinv(&s11) * &s12, true),
    };
    let mean = k.dot(&score) / nf.sqrt();
    let variance = (s22 - k.dot(&s12)).max(0.0);
    Ok(ThetaConditional {
        n,
        weighted_total,
        weight_sum,
        mean,
        variance,
        pseudo_inverse_used,
    })
}

/// Posterior step 2b: one draw of `theta | phi` under a flat prior.
pub fn draw_theta_step<R: Rng + ?Sized>(
    data: &Dataset,
    phi: &PropensityParams,
    active: &ModelIndicator,
    rng: &mut R,
) -> Result<f64> {
    let cond = theta_conditional(data, phi, active)?;
    let v = cond.mean + cond.variance.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
    Ok(cond.theta_for(v))
}

/// Cache of Laplace fits keyed by model indicator.
#[derive(Debug, Default)]
pub(crate) struct ModeCache {
    fits: HashMap<ModelIndicator, Arc<LaplaceFit>>,
    pub solves: usize,
}

impl ModeCache {
    fn get_or_solve(
        &mut self,
        data: &Dataset,
        z: &ModelIndicator,
        priors: &PriorConfig,
        start: &DVector<f64>,
    ) -> Result<Arc<LaplaceFit>> {
        if let Some(fit) = self.fits.get(z) {
            return Ok(Arc::clone(fit));
        }
        self.solves += 1;
        let fit = Arc::new(converged(solve_penalized(data, z, priors, start)?)?);
        if self.fits.len() >= CACHE_LIMIT {
            self.fits.clear();
        }
        self.fits.insert(z.clone(), Arc::clone(&fit));
        Ok(fit)
    }
}

/// Running BSPS chain; also drives the first stage of OBSPS.
pub(crate) struct BspsChain<'a> {
    data: &'a Dataset,
    priors: &'a PriorConfig,
    cache: ModeCache,
    pub z: ModelIndicator,
    pub phi: PropensityParams,
    last_mode: DVector<f64>,
    pub failures: usize,
    pub sparse_start: bool,
}

/// Unconverged, or fitted probabilities numerically 0 or 1.
fn degenerate(data: &Dataset, fit: &LaplaceFit) -> bool {
    const EPS: f64 = 1e-8;
    !fit.converged
        || (data.x() * &fit.mode)
            .map(link_logistic)
            .iter()
            .any(|&p| p < EPS || p > 1.0 - EPS)
}

impl<'a> BspsChain<'a> {
    /// Dense start: `z = 1` everywhere and `phi` at the all-slab penalized
    /// mode. When that mode is degenerate (separated data, typically
    /// `p + 1` close to or above the respondent count) the dense model is
    /// nearly absorbing, so the chain starts from the cross-validated LASSO
    /// support instead; `rng` is only used for its folds.
    pub fn new<R: Rng + ?Sized>(
        data: &'a Dataset,
        priors: &'a PriorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        priors.validate(data.dim())?;
        if data.respondents() == 0 {
            return Err(Error::NoRespondents);
        }
        let d = data.dim();
        let mut z = ModelIndicator::all(d);
        let mut init = solve_penalized(data, &z, priors, &DVector::zeros(d))?;
        let mut sparse_start = false;
        if degenerate(data, &init) {
            let grid = default_lambda_grid(data, START_GRID.0, START_GRID.1);
            if let Ok(fit) = fit_lasso_logistic(data, &grid, START_FOLDS, rng) {
                z = fit.support;
                init = solve_penalized(data, &z, priors, fit.phi.as_vector())?;
                sparse_start = true;
            }
        }
        Ok(Self {
            data,
            priors,
            cache: ModeCache::default(),
            z,
            phi: PropensityParams(init.mode.clone()),
            last_mode: init.mode,
            failures: 0,
            sparse_start,
        })
    }

    /// Model step followed by the `phi` draw. A failed mode solve keeps the
    /// previous `phi` and is counted.
    pub fn step_model_and_phi<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.z = draw_model_step(&self.phi, self.priors, rng);
        match self
            .cache
            .get_or_solve(self.data, &self.z, self.priors, &self.last_mode)
        {
            Ok(fit) => {
                self.last_mode.copy_from(&fit.mode);
                self.phi = fit.draw(rng);
            }
            Err(_) => self.failures += 1,
        }
    }

    pub fn mode_solves(&self) -> usize {
        self.cache.solves
    }
}

fn failure_budget(total: usize) -> usize {
    total / 100
}

/// Runs the BSPS Gibbs sampler and keeps `kept` draws after `burn_in`.
pub fn run_bsps_chain(
    data: &Dataset,
    priors: &PriorConfig,
    burn_in: usize,
    kept: usize,
    seed: u64,
) -> Result<PosteriorSample> {
    if burn_in < 1 || kept < 1 {
        return Err(Error::InvalidArgument(
            "burn_in and kept must be at least 1".into(),
        ));
    }
    let tree = SeedTree::new(seed);
    let mut rng = tree.stream(&[]);
    let mut chain = BspsChain::new(data, priors, &mut tree.stream(&[START_STREAM]))?;
    let total = burn_in + kept;
    let mut draws = Vec::with_capacity(kept);
    let mut theta = crate::baseline::ps_point_estimate(data, &chain.phi)?;
    let mut pinv_events = 0u64;
    for t in 0..total {
        let before = chain.failures;
        chain.step_model_and_phi(&mut rng);
        if chain.failures == before {
            let cond = theta_conditional(data, &chain.phi, &chain.z)?;
            pinv_events += cond.pseudo_inverse_used as u64;
            let v =
                cond.mean + cond.variance.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
            theta = cond.theta_for(v);
        }
        if chain.failures > failure_budget(total) {
            return Err(Error::ChainFailure {
                failures: chain.failures,
                iterations: t + 1,
            });
        }
        if t >= burn_in {
            draws.push(ChainState {
                z: chain.z.clone(),
                phi: chain.phi.clone(),
                theta,
                working: None,
            });
        }
    }
    let mut diagnostics = Diagnostics::new();
    diagnostics.insert("failed_iterations".into(), chain.failures as u64);
    diagnostics.insert("mode_solves".into(), chain.mode_solves() as u64);
    diagnostics.insert("pseudo_inverse_events".into(), pinv_events);
    diagnostics.insert("sparse_start".into(), chain.sparse_start as u64);
    Ok(PosteriorSample {
        method: Method::Bsps,
        draws,
        burn_in,
        kept,
        seed,
        diagnostics,
    })
}

/// Type-7 (linear interpolation) sample quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fraction of draws that include each coordinate.
pub fn inclusion_frequencies(sample: &PosteriorSample) -> Vec<f64> {
    let Some(first) = sample.draws.first() else {
        return Vec::new();
    };
    let pick = |s: &ChainState| -> ModelIndicator {
        match (&s.working, sample.method) {
            (Some(w), Method::Obsps) => w.u.clone(),
            _ => s.z.clone(),
        }
    };
    let d = pick(first).len();
    let mut freq = vec![0.0; d];
    for s in &sample.draws {
        for (f, &on) in freq.iter_mut().zip(pick(s).as_slice()) {
            *f += on as u8 as f64;
        }
    }
    let m = sample.draws.len() as f64;
    freq.iter_mut().for_each(|f| *f /= m);
    freq
}

/// Posterior mean, standard deviation and equal-tailed interval of `theta`;
/// the selected support is the median probability model.
pub fn summarize_posterior(sample: &PosteriorSample, level: f64) -> EstimateReport {
    let m = sample.draws.len();
    if m < 2 {
        let mut r = EstimateReport::failed(sample.method, "too_few_draws");
        if let Some(s) = sample.draws.first() {
            r.theta_hat = s.theta;
        }
        return r;
    }
    let thetas: Vec<f64> = sample.draws.iter().map(|s| s.theta).collect();
    let mean = thetas.iter().sum::<f64>() / m as f64;
    let var = thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let mut sorted = thetas;
    sorted.sort_by(|a, b| a.total_cmp(b));
    let alpha = (1.0 - level) / 2.0;
    let support = ModelIndicator::new(
        inclusion_frequencies(sample)
            .iter()
            .map(|&f| f > 0.5)
            .collect(),
    );
    EstimateReport {
        theta_hat: mean,
        se_hat: var.sqrt(),
        ci_low: quantile_sorted(&sorted, alpha),
        ci_high: quantile_sorted(&sorted, 1.0 - alpha),
        method: sample.method,
        selected_support: Some(support),
        converged: true,
        diagnostics: sample.diagnostics.clone(),
    }
}

/// Chain plus summary; estimator errors become a non-converged report.
pub fn estimate_bsps(
    data: &Dataset,
    priors: &PriorConfig,
    chain: ChainConfig,
    seed: u64,
) -> EstimateReport {
    match run_bsps_chain(data, priors, chain.burn_in, chain.kept, seed) {
        Ok(sample) => summarize_posterior(&sample, 0.95),
        Err(e) => EstimateReport::failed(Method::Bsps, crate::report::failure_key(&e)),
    }
}
