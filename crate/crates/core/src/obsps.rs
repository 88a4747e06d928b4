//! Optimal BSPS sampler.
//!
//! Each outer iteration runs one BSPS model/`phi` step to obtain `z`, then a
//! short Gibbs sub-chain on the working outcome model
//! `y = x' beta + e, e ~ N(0, sigma2_e)` that augments `z` with
//! outcome-relevant covariates (`u ⊇ z`), and finally draws
//! `zeta = (phi_u, theta)` from the normal approximation to the posterior
//! built on the over-identified system `U_opt(u)`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;

use crate::baseline::{fit_propensity_mle, ps_point_estimate, scatter};
use crate::bsps::{
    inclusion_probability, penalized_mode, summarize_posterior, BspsChain, ChainConfig, ChainState,
    PosteriorSample, START_STREAM,
};
use crate::error::{Error, Result};
use crate::gmm::{
    build_u_opt, gmm_solve, GmmSolution, NormalApproximation, ZetaPosterior, ZetaSampler,
};
use crate::linalg;
use crate::model::{Dataset, ModelIndicator, PriorConfig, PropensityParams};
use crate::report::{failure_key, Diagnostics, EstimateReport, Method};
use crate::rng::SeedTree;

/// Working-model Gibbs sub-iterations per outer iteration.
pub const WORKING_SUBITERATIONS: usize = 20;
const CACHE_LIMIT: usize = 512;

/// State of the working outcome model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkingModelState {
    pub u: ModelIndicator,
    pub beta: DVector<f64>,
    pub sigma2_e: f64,
}

/// I-step: `u_j = 1` where `z_j = 1`, otherwise a Bernoulli draw with the
/// slab inclusion probability of `beta_j`.
pub fn draw_u_step<R: Rng + ?Sized>(
    state: &WorkingModelState,
    z: &ModelIndicator,
    priors: &PriorConfig,
    rng: &mut R,
) -> ModelIndicator {
    let u = (0..z.len())
        .map(|j| {
            z.get(j) || {
                let p = inclusion_probability(
                    state.beta[j],
                    priors.xi[j],
                    priors.gamma0,
                    priors.gamma1,
                );
                rng.random::<f64>() < p
            }
        })
        .collect();
    ModelIndicator::new(u)
}

/// Respondent sufficient statistics for the working model.
#[derive(Debug, Clone)]
pub struct RespondentGram {
    /// `sum delta x x'`
    pub xtx: DMatrix<f64>,
    /// `sum delta x y`
    pub xty: DVector<f64>,
    pub xr: DMatrix<f64>,
    pub yr: DVector<f64>,
}

impl RespondentGram {
    pub fn new(data: &Dataset) -> Self {
        let rows: Vec<usize> = (0..data.n()).filter(|&i| data.responded(i)).collect();
        let xr = data.x().select_rows(&rows);
        let yr = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.y_obs()[i]));
        let xtx = linalg::symmetrize(xr.tr_mul(&xr));
        let xty = xr.tr_mul(&yr);
        Self { xtx, xty, xr, yr }
    }

    pub fn respondents(&self) -> usize {
        self.yr.len()
    }

    fn rss(&self, beta: &DVector<f64>) -> f64 {
        (&self.yr - &self.xr * beta).norm_squared()
    }
}

/// Conditional mean and covariance of `beta` given `u` and `sigma2`.
pub fn beta_conditional(
    gram: &RespondentGram,
    u: &ModelIndicator,
    sigma2: f64,
    priors: &PriorConfig,
) -> (DVector<f64>, DMatrix<f64>) {
    let prec = beta_precision(gram, u, sigma2, priors);
    let chol = Cholesky::new(prec).expect("working-model precision is positive definite");
    (
        chol.solve(&(&gram.xty / sigma2)),
        linalg::symmetrize(chol.inverse()),
    )
}

fn beta_precision(
    gram: &RespondentGram,
    u: &ModelIndicator,
    sigma2: f64,
    priors: &PriorConfig,
) -> DMatrix<f64> {
    let mut prec = &gram.xtx / sigma2;
    for (j, v) in priors.beta_prior_variances(u).iter().enumerate() {
        prec[(j, j)] += 1.0 / v;
    }
    prec
}

fn draw_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0).expect("positive gamma shape");
    scale / g.sample(rng)
}

/// P-step on precomputed respondent statistics.
pub fn draw_beta_sigma_with<R: Rng + ?Sized>(
    gram: &RespondentGram,
    u: &ModelIndicator,
    sigma2_prev: f64,
    priors: &PriorConfig,
    rng: &mut R,
) -> WorkingModelState {
    let prec = beta_precision(gram, u, sigma2_prev, priors);
    let chol = Cholesky::new(prec).expect("working-model precision is positive definite");
    let mean = chol.solve(&(&gram.xty / sigma2_prev));
    let beta = linalg::mvn_from_precision(&mean, &chol, rng);
    let r = gram.respondents() as f64;
    let sigma2_e = draw_inv_gamma(priors.c1 + r / 2.0, priors.c2 + gram.rss(&beta) / 2.0, rng);
    WorkingModelState {
        u: u.clone(),
        beta,
        sigma2_e,
    }
}

/// P-step: `beta ~ N(mu*, V*)` given `sigma2_prev`, then
/// `sigma2_e ~ InvGamma(c1 + r/2, c2 + RSS(beta)/2)`.
pub fn draw_beta_sigma<R: Rng + ?Sized>(
    data: &Dataset,
    u: &ModelIndicator,
    sigma2_prev: f64,
    priors: &PriorConfig,
    rng: &mut R,
) -> Result<WorkingModelState> {
    if data.respondents() == 0 {
        return Err(Error::NoRespondents);
    }
    if u.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: u.len(),
        });
    }
    if !(sigma2_prev > 0.0) {
        return Err(Error::InvalidArgument(
            "sigma2_prev must be positive".into(),
        ));
    }
    Ok(draw_beta_sigma_with(
        &RespondentGram::new(data),
        u,
        sigma2_prev,
        priors,
        rng,
    ))
}

fn respondent_variance(gram: &RespondentGram) -> f64 {
    let r = gram.respondents() as f64;
    let mean = gram.yr.mean();
    let v = gram.yr.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (r - 1.0).max(1.0);
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

/// Starting value for the GMM solve: plain PS fit on the support of `u`,
/// falling back to the penalized mode if the MLE does not exist.
fn gmm_init(data: &Dataset, u: &ModelIndicator, priors: &PriorConfig) -> Result<DVector<f64>> {
    let phi = match fit_propensity_mle(data, u) {
        Ok(phi) => phi,
        Err(_) => penalized_mode(data, u, priors)?,
    };
    let theta = ps_point_estimate(data, &phi)?;
    let mut v: Vec<f64> = u.active().iter().map(|&j| phi[j]).collect();
    v.push(theta);
    Ok(DVector::from_vec(v))
}

/// Solves `U_opt(u)` and returns its normal posterior approximation.
pub fn zeta_posterior(
    data: &Dataset,
    u: &ModelIndicator,
    priors: &PriorConfig,
) -> Result<ZetaPosterior> {
    let system = build_u_opt(data, u)?;
    let init = gmm_init(data, u, priors)?;
    ZetaPosterior::new(gmm_solve(&system, &init)?)
}

#[derive(Default)]
struct GmmCache {
    entries: HashMap<ModelIndicator, Option<Arc<ZetaPosterior>>>,
    solves: usize,
    ridge_events: usize,
}

impl GmmCache {
    fn get(
        &mut self,
        data: &Dataset,
        u: &ModelIndicator,
        priors: &PriorConfig,
    ) -> Option<Arc<ZetaPosterior>> {
        if let Some(hit) = self.entries.get(u) {
            return hit.clone();
        }
        self.solves += 1;
        let post = zeta_posterior(data, u, priors).ok().map(Arc::new);
        if let Some(p) = &post {
            self.ridge_events += p.solution.ridge_events;
        }
        if self.entries.len() >= CACHE_LIMIT {
            self.entries.clear();
        }
        self.entries.insert(u.clone(), post.clone());
        post
    }
}

/// Runs the OBSPS sampler with the default normal approximation for `zeta`.
pub fn run_obsps_chain(
    data: &Dataset,
    priors: &PriorConfig,
    burn_in: usize,
    kept: usize,
    seed: u64,
) -> Result<PosteriorSample> {
    run_obsps_chain_with(data, priors, burn_in, kept, seed, &NormalApproximation)
}

/// Runs the OBSPS sampler with a caller-supplied `zeta` sampler.
pub fn run_obsps_chain_with<S: ZetaSampler>(
    data: &Dataset,
    priors: &PriorConfig,
    burn_in: usize,
    kept: usize,
    seed: u64,
    sampler: &S,
) -> Result<PosteriorSample> {
    if burn_in < 1 || kept < 1 {
        return Err(Error::InvalidArgument(
            "burn_in and kept must be at least 1".into(),
        ));
    }
    let tree = SeedTree::new(seed);
    let mut rng = tree.stream(&[]);
    let mut chain = BspsChain::new(data, priors, &mut tree.stream(&[START_STREAM]))?;
    let gram = RespondentGram::new(data);
    let d = data.dim();
    let mut cache = GmmCache::default();

    let mut working = {
        let u = chain.z.clone();
        draw_beta_sigma_with(&gram, &u, respondent_variance(&gram), priors, &mut rng)
    };
    let mut theta = ps_point_estimate(data, &chain.phi)?;
    let mut phi_star = chain.phi.clone();
    let mut gmm_failures = 0usize;

    let total = burn_in + kept;
    let budget = total / 100;
    let mut draws = Vec::with_capacity(kept);
    for t in 0..total {
        chain.step_model_and_phi(&mut rng);

        for _ in 0..WORKING_SUBITERATIONS {
            let u = draw_u_step(&working, &chain.z, priors, &mut rng);
            working = draw_beta_sigma_with(&gram, &u, working.sigma2_e, priors, &mut rng);
        }

        match cache.get(data, &working.u, priors) {
            Some(post) => {
                let zeta = sampler.sample(&post, &mut rng);
                let q = zeta.len() - 1;
                theta = zeta[q];
                phi_star = scatter(&zeta.rows(0, q).into_owned(), &working.u.active(), d);
            }
            None => gmm_failures += 1,
        }

        let failures = chain.failures + gmm_failures;
        if failures > budget {
            return Err(Error::ChainFailure {
                failures,
                iterations: t + 1,
            });
        }
        if t >= burn_in {
            draws.push(ChainState {
                z: chain.z.clone(),
                phi: phi_star.clone(),
                theta,
                working: Some(working.clone()),
            });
        }
    }

    let mut diagnostics = Diagnostics::new();
    diagnostics.insert(
        "failed_iterations".into(),
        (chain.failures + gmm_failures) as u64,
    );
    diagnostics.insert("mode_solves".into(), chain.mode_solves() as u64);
    diagnostics.insert("gmm_solves".into(), cache.solves as u64);
    diagnostics.insert("gmm_failures".into(), gmm_failures as u64);
    diagnostics.insert("singular_weight_events".into(), cache.ridge_events as u64);
    diagnostics.insert("sparse_start".into(), chain.sparse_start as u64);
    Ok(PosteriorSample {
        method: Method::Obsps,
        draws,
        burn_in,
        kept,
        seed,
        diagnostics,
    })
}

/// Chain plus summary; the selected support is the median-probability `u`.
pub fn estimate_obsps(
    data: &Dataset,
    priors: &PriorConfig,
    chain: ChainConfig,
    seed: u64,
) -> EstimateReport {
    match run_obsps_chain(data, priors, chain.burn_in, chain.kept, seed) {
        Ok(sample) => summarize_posterior(&sample, 0.95),
        Err(e) => EstimateReport::failed(Method::Obsps, failure_key(&e)),
    }
}

/// GMM solution for a fixed augmented support, exposed for diagnostics.
pub fn solve_opt_system(
    data: &Dataset,
    u: &ModelIndicator,
    priors: &PriorConfig,
) -> Result<GmmSolution> {
    Ok(zeta_posterior(data, u, priors)?.solution)
}

/// Scatters the `phi` part of a `zeta` draw back into full coordinates.
pub fn phi_from_zeta(zeta: &DVector<f64>, u: &ModelIndicator) -> PropensityParams {
    let q = zeta.len() - 1;
    scatter(&zeta.rows(0, q).into_owned(), &u.active(), u.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::link_logistic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn synthetic(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::from_element(n, p + 1, 1.0);
        for i in 0..n {
            for j in 1..=p {
                x[(i, j)] = rng.sample(StandardNormal);
            }
        }
        let delta: Vec<bool> = (0..n)
            .map(|i| rng.random::<f64>() < link_logistic(1.0 + x[(i, 1)]))
            .collect();
        let y = (0..n)
            .map(|i| delta[i].then(|| 2.0 + 2.0 * x[(i, 2)] + rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Dataset::new(x, y, delta).unwrap()
    }

    fn state(beta: Vec<f64>) -> WorkingModelState {
        let d = beta.len();
        WorkingModelState {
            u: ModelIndicator::all(d),
            beta: DVector::from_vec(beta),
            sigma2_e: 1.0,
        }
    }

    #[test]
    fn u_step_respects_z_and_density_ratio() {
        let priors = PriorConfig::default_for(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = ModelIndicator::from_active(3, &[1]);
        let s = state(vec![0.0, 0.0, 1.0]);
        for _ in 0..200 {
            let u = draw_u_step(&s, &z, &priors, &mut rng);
            assert!(u.contains(&z));
            assert!(u.get(2));
        }
        assert!((inclusion_probability(0.0, 0.5, 1e-4, 1e4) - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn single_respondent_scalar_conjugate() {
        let data = Dataset::new(
            DMatrix::from_element(1, 1, 1.0),
            vec![Some(3.0)],
            vec![true],
        )
        .unwrap();
        let gram = RespondentGram::new(&data);
        let mut priors = PriorConfig::default_for(1);
        priors.gamma1 = 1e12;
        let (mean, cov) = beta_conditional(&gram, &ModelIndicator::all(1), 1.0, &priors);
        // V* = 1 / (1 + 1e-12), mu* = 3 V*
        assert!((cov[(0, 0)] - 1.0 / (1.0 + 1e-12)).abs() < 1e-15);
        assert!((mean[0] - 3.0 / (1.0 + 1e-12)).abs() < 1e-14);
    }

    #[test]
    fn flat_prior_limit_is_ols() {
        let data = synthetic(200, 3, 2);
        let gram = RespondentGram::new(&data);
        let mut priors = PriorConfig::default_for(4);
        priors.gamma1 = 1e14;
        let (mean, _) = beta_conditional(&gram, &ModelIndicator::all(4), 1.0, &priors);
        let ols = gram
            .xr
            .clone()
            .svd(true, true)
            .solve(&gram.yr, 1e-14)
            .unwrap();
        assert!((mean - ols).amax() < 1e-8);
    }

    #[test]
    fn sigma_draws_match_inverse_gamma_mean() {
        let data = synthetic(150, 2, 3);
        let gram = RespondentGram::new(&data);
        let priors = PriorConfig::default_for(3);
        let beta = DVector::from_vec(vec![2.0, 0.0, 2.0]);
        let shape = priors.c1 + gram.respondents() as f64 / 2.0;
        let scale = priors.c2 + gram.rss(&beta) / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 10_000;
        let mean = (0..m)
            .map(|_| draw_inv_gamma(shape, scale, &mut rng))
            .sum::<f64>()
            / m as f64;
        let expected = scale / (shape - 1.0);
        assert!((mean / expected - 1.0).abs() < 0.02);
    }

    #[test]
    fn working_state_invariants() {
        let data = synthetic(100, 4, 5);
        let priors = PriorConfig::default_for(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = ModelIndicator::from_active(5, &[1]);
        // dense start, as in the sampler; a spike coordinate is nearly absorbing
        let mut s =
            draw_beta_sigma(&data, &ModelIndicator::all(5), 1.0, &priors, &mut rng).unwrap();
        for _ in 0..50 {
            let u = draw_u_step(&s, &z, &priors, &mut rng);
            assert!(u.contains(&z));
            s = draw_beta_sigma(&data, &u, s.sigma2_e, &priors, &mut rng).unwrap();
            assert!(s.sigma2_e > 0.0);
        }
        // the outcome column is strongly relevant
        assert!(s.u.get(2));
    }

    #[test]
    fn chain_is_deterministic_and_augments_z() {
        let data = synthetic(150, 4, 7);
        let priors = PriorConfig::default_for(5);
        let a = run_obsps_chain(&data, &priors, 20, 20, 9).unwrap();
        let b = run_obsps_chain(&data, &priors, 20, 20, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.draws.len(), 20);
        for s in &a.draws {
            let w = s.working.as_ref().unwrap();
            assert!(w.u.contains(&s.z));
            assert!(s.theta.is_finite());
        }
        let r = summarize_posterior(&a, 0.95);
        assert!(r.selected_support.unwrap().get(2));
    }
}
