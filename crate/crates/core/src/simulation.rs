//! Data-generating processes, Monte Carlo driver and summary metrics.
//!
//! Covariates are an intercept plus `p` AR(1)-correlated standard normal
//! columns. The response mechanism is `logit P(delta = 1) = 1 + x_1` and the
//! outcome models are
//!
//! * `M1`: `y = 2 + 2 x_2 + e`
//! * `M2`: `y = 1.5 + 0.5 x_2^2 + 2 x_3 + e`
//!
//! with `e ~ N(0, 1)`, so `E(y) = 2` under both. Each stochastic column and
//! each noise vector has its own random stream, which makes every column
//! independent of `p`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::estimate_ps;
use crate::bsps::{estimate_bsps, ChainConfig};
use crate::error::{Error, Result};
use crate::lasso::estimate_lasso;
use crate::model::{link_logistic, Dataset, ModelIndicator, PriorConfig};
use crate::obsps::estimate_obsps;
use crate::report::{EstimateReport, Method};
use crate::rng::{SeedTree, STREAM_BSPS, STREAM_DATA, STREAM_LASSO, STREAM_OBSPS};

/// True population mean of `y` under both outcome models.
pub const THETA0: f64 = 2.0;

const OUTCOME_STREAM: u64 = u64::MAX - 1;
const RESPONSE_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeModel {
    M1,
    M2,
}

impl OutcomeModel {
    /// Stochastic columns (1-based, intercept is column 0) the outcome depends on linearly.
    pub fn linear_columns(&self) -> &'static [usize] {
        match self {
            OutcomeModel::M1 => &[2],
            OutcomeModel::M2 => &[3],
        }
    }

    pub fn min_p(&self) -> usize {
        match self {
            OutcomeModel::M1 => 2,
            OutcomeModel::M2 => 4,
        }
    }
}

impl fmt::Display for OutcomeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_chain() -> ChainConfig {
    ChainConfig {
        burn_in: 500,
        kept: 500,
    }
}

fn default_folds() -> usize {
    5
}

/// One simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: OutcomeModel,
    #[serde(default)]
    pub rho: f64,
    pub p: usize,
    pub n: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_chain")]
    pub bsps: ChainConfig,
    #[serde(default = "default_chain")]
    pub obsps: ChainConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

impl ScenarioConfig {
    /// Desk-scale defaults: `n = 200`, `B = 200`, all methods, 500/500 chains.
    pub fn new(model: OutcomeModel, rho: f64, p: usize) -> Self {
        Self {
            model,
            rho,
            p,
            n: 200,
            b: 200,
            methods: default_methods(),
            seed: 0,
            bsps: default_chain(),
            obsps: default_chain(),
            folds: default_folds(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if self.p < self.model.min_p().max(2) {
            return bad(format!("p = {} is too small for {}", self.p, self.model));
        }
        if self.b < 1 {
            return bad("B must be at least 1".into());
        }
        if self.n < 2 {
            return bad("n must be at least 2".into());
        }
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        for c in [self.bsps, self.obsps] {
            if c.burn_in < 1 || c.kept < 1 {
                return bad("chain burn_in and kept must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        format!("{}_rho{}_p{}_n{}", self.model, self.rho, self.p, self.n)
    }

    /// True response-model support `{intercept, x_1}`.
    pub fn response_support(&self) -> ModelIndicator {
        ModelIndicator::from_active(self.p + 1, &[1])
    }

    /// Support OBSPS aims for: the response support plus the covariates
    /// linearly related to the outcome.
    pub fn augmented_support(&self) -> ModelIndicator {
        let mut active = vec![1];
        active.extend_from_slice(self.model.linear_columns());
        ModelIndicator::from_active(self.p + 1, &active)
    }

    /// Target support used for TPR/TNR of `method`.
    pub fn target_support(&self, method: Method) -> ModelIndicator {
        match method {
            Method::Obsps => self.augmented_support(),
            _ => self.response_support(),
        }
    }
}

/// Intercept plus `p` AR(1) columns, each drawn from its own stream of `tree`.
pub fn gen_covariates(n: usize, p: usize, rho: f64, tree: &SeedTree) -> DMatrix<f64> {
    let mut x = DMatrix::from_element(n, p + 1, 1.0);
    let s = (1.0 - rho * rho).sqrt();
    for j in 1..=p {
        let mut rng = tree.stream(&[j as u64]);
        for i in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            x[(i, j)] = if j == 1 {
                e
            } else {
                rho * x[(i, j - 1)] + s * e
            };
        }
    }
    x
}

/// Mean function of the outcome model at row `i`.
pub fn outcome_mean(model: OutcomeModel, x: &DMatrix<f64>, i: usize) -> f64 {
    match model {
        OutcomeModel::M1 => 2.0 + 2.0 * x[(i, 2)],
        OutcomeModel::M2 => 1.5 + 0.5 * x[(i, 2)].powi(2) + 2.0 * x[(i, 3)],
    }
}

pub fn gen_outcome<R: Rng + ?Sized>(
    model: OutcomeModel,
    x: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    DVector::from_iterator(
        x.nrows(),
        (0..x.nrows()).map(|i| outcome_mean(model, x, i) + rng.sample::<f64, _>(StandardNormal)),
    )
}

/// `delta_i ~ Bernoulli(logistic(1 + x_i1))`.
pub fn gen_response<R: Rng + ?Sized>(x: &DMatrix<f64>, rng: &mut R) -> Vec<bool> {
    (0..x.nrows())
        .map(|i| rng.random::<f64>() < link_logistic(1.0 + x[(i, 1)]))
        .collect()
}

/// Complete data for one replication.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    /// Outcome for every unit, including nonrespondents.
    pub y_full: DVector<f64>,
}

/// Generates replication `rep` of `config`; depends only on `(seed, rep)`.
pub fn generate_replication(config: &ScenarioConfig, rep: u64) -> Result<SimulatedData> {
    let tree = SeedTree::new(config.seed).child(&[rep, STREAM_DATA]);
    let x = gen_covariates(config.n, config.p, config.rho, &tree);
    let y_full = gen_outcome(config.model, &x, &mut tree.stream(&[OUTCOME_STREAM]));
    let delta = gen_response(&x, &mut tree.stream(&[RESPONSE_STREAM]));
    let y = delta
        .iter()
        .zip(y_full.iter())
        .map(|(&d, &v)| d.then_some(v))
        .collect();
    Ok(SimulatedData {
        dataset: Dataset::new(x, y, delta)?,
        y_full,
    })
}

/// One method applied to one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub replication: u64,
    pub report: EstimateReport,
}

/// Applies `method` to `data` with the seeds of replication `rep`.
pub fn apply_method(
    config: &ScenarioConfig,
    data: &Dataset,
    method: Method,
    rep: u64,
) -> EstimateReport {
    let tree = SeedTree::new(config.seed);
    let d = data.dim();
    let priors = PriorConfig::default_for(d);
    let mut report = match method {
        Method::Ps => estimate_ps(data, &ModelIndicator::all(d), Method::Ps),
        Method::Tps => estimate_ps(data, &config.response_support(), Method::Tps),
        Method::Lasso => estimate_lasso(data, config.folds, &mut tree.stream(&[rep, STREAM_LASSO])),
        Method::Bsps => estimate_bsps(
            data,
            &priors,
            config.bsps,
            tree.child_seed(&[rep, STREAM_BSPS]),
        ),
        Method::Obsps => estimate_obsps(
            data,
            &priors,
            config.obsps,
            tree.child_seed(&[rep, STREAM_OBSPS]),
        ),
    };
    if method == Method::Tps {
        report.selected_support = None;
    }
    report
}

/// Aggregated metrics for one method in one scenario. Fields that need more
/// converged replications than are available are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub method: Method,
    pub rbias: Option<f64>,
    pub se: Option<f64>,
    pub mean_se_hat: Option<f64>,
    pub cp: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub n_converged: usize,
    pub n_failed: usize,
    pub mc_se_of_cp: Option<f64>,
}

/// Summarizes replication reports of a single method against `theta0` and
/// the target support `z_true`.
pub fn compute_metrics(
    scenario: &str,
    method: Method,
    results: &[EstimateReport],
    theta0: f64,
    z_true: &ModelIndicator,
) -> MetricsRow {
    let ok: Vec<&EstimateReport> = results
        .iter()
        .filter(|r| r.converged && r.theta_hat.is_finite())
        .collect();
    let m = ok.len();
    let mf = m as f64;
    let mut row = MetricsRow {
        scenario: scenario.to_string(),
        method,
        rbias: None,
        se: None,
        mean_se_hat: None,
        cp: None,
        tpr: None,
        tnr: None,
        n_converged: m,
        n_failed: results.len() - m,
        mc_se_of_cp: None,
    };
    if m == 0 {
        return row;
    }
    let mean = ok.iter().map(|r| r.theta_hat).sum::<f64>() / mf;
    row.rbias = Some((mean - theta0) / theta0);
    if m >= 2 {
        let var = ok.iter().map(|r| (r.theta_hat - mean).powi(2)).sum::<f64>() / (mf - 1.0);
        row.se = Some(var.sqrt());
    }
    row.mean_se_hat = Some(ok.iter().map(|r| r.se_hat).sum::<f64>() / mf);
    let cp = ok.iter().filter(|r| r.covers(theta0)).count() as f64 / mf;
    row.cp = Some(cp);
    row.mc_se_of_cp = Some((cp * (1.0 - cp) / mf).sqrt());

    if method.selects() {
        let supports: Vec<&ModelIndicator> = ok
            .iter()
            .filter_map(|r| r.selected_support.as_ref())
            .collect();
        if !supports.is_empty() {
            let k = supports.len() as f64;
            let (tpr, tnr): (f64, f64) = supports
                .iter()
                .map(|s| selection_rates(s, z_true))
                .fold((0.0, 0.0), |(a, b), (t, f)| (a + t, b + f));
            row.tpr = Some(tpr / k);
            row.tnr = Some(tnr / k);
        }
    }
    row
}

/// True positive and true negative rates of `selected` against `truth`,
/// ignoring the intercept. A rate with an empty denominator is 1.
pub fn selection_rates(selected: &ModelIndicator, truth: &ModelIndicator) -> (f64, f64) {
    let (mut tp, mut pos, mut tn, mut neg) = (0, 0, 0, 0);
    for j in 1..truth.len() {
        if truth.get(j) {
            pos += 1;
            tp += selected.get(j) as usize;
        } else {
            neg += 1;
            tn += !selected.get(j) as usize;
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    (rate(tp, pos), rate(tn, neg))
}

/// Output of a scenario run.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloOutput {
    pub config: ScenarioConfig,
    pub rows: Vec<MetricsRow>,
    /// Per-method replication reports, ordered by method then replication.
    pub replications: Vec<(Method, Vec<ReplicationRecord>)>,
}

impl MonteCarloOutput {
    pub fn reports(&self, method: Method) -> Option<Vec<EstimateReport>> {
        self.replications
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, recs)| recs.iter().map(|r| r.report.clone()).collect())
    }

    pub fn row(&self, method: Method) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn any_failures(&self) -> bool {
        self.rows.iter().any(|r| r.n_failed > 0)
    }
}

/// Runs all replications on the current rayon pool and aggregates them in
/// replication order.
pub fn run_monte_carlo(config: &ScenarioConfig) -> Result<MonteCarloOutput> {
    config.validate()?;
    let mut methods = config.methods.clone();
    methods.sort();
    methods.dedup();

    let per_rep: Vec<Vec<EstimateReport>> = (0..config.b as u64)
        .into_par_iter()
        .map(|rep| match generate_replication(config, rep) {
            Ok(sim) => methods
                .iter()
                .map(|&m| apply_method(config, &sim.dataset, m, rep))
                .collect(),
            Err(e) => methods
                .iter()
                .map(|&m| EstimateReport::failed(m, crate::report::failure_key(&e)))
                .collect(),
        })
        .collect();

    let id = config.id();
    let mut rows = Vec::with_capacity(methods.len());
    let mut replications = Vec::with_capacity(methods.len());
    for (k, &method) in methods.iter().enumerate() {
        let reports: Vec<EstimateReport> = per_rep.iter().map(|r| r[k].clone()).collect();
        rows.push(compute_metrics(
            &id,
            method,
            &reports,
            THETA0,
            &config.target_support(method),
        ));
        let recs = reports
            .into_iter()
            .enumerate()
            .map(|(i, report)| ReplicationRecord {
                replication: i as u64,
                report,
            })
            .collect();
        replications.push((method, recs));
    }
    Ok(MonteCarloOutput {
        config: config.clone(),
        rows,
        replications,
    })
}

/// [`run_monte_carlo`] on a dedicated pool of `workers` threads.
pub fn run_monte_carlo_with_workers(
    config: &ScenarioConfig,
    workers: usize,
) -> Result<MonteCarloOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    pool.install(|| run_monte_carlo(config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(theta: f64, se: f64) -> EstimateReport {
        EstimateReport::wald(Method::Ps, theta, se)
    }

    #[test]
    fn metrics_hand_arithmetic() {
        let z = ModelIndicator::from_active(3, &[1]);
        let row = compute_metrics(
            "s",
            Method::Ps,
            &[report(1.0, 0.1), report(3.0, 0.1)],
            2.0,
            &z,
        );
        assert!(row.rbias.unwrap().abs() < 1e-15);
        assert!((row.se.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(row.cp, Some(0.0));
        assert_eq!(row.tpr, None);

        let row = compute_metrics("s", Method::Ps, &vec![report(2.0, 0.1); 4], 2.0, &z);
        assert_eq!(
            (row.rbias, row.cp, row.mc_se_of_cp),
            (Some(0.0), Some(1.0), Some(0.0))
        );
    }

    #[test]
    fn single_replication_has_no_spread() {
        let z = ModelIndicator::from_active(3, &[1]);
        let row = compute_metrics("s", Method::Ps, &[report(2.1, 0.1)], 2.0, &z);
        assert_eq!(row.se, None);
        assert!(row.cp.is_some());
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let z = ModelIndicator::from_active(3, &[1]);
        let res = [
            report(2.0, 0.1),
            EstimateReport::failed(Method::Ps, "x"),
            report(2.2, 0.1),
        ];
        let row = compute_metrics("s", Method::Ps, &res, 2.0, &z);
        assert_eq!((row.n_converged, row.n_failed), (2, 1));
        assert!((row.rbias.unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn selection_rates_ignore_intercept() {
        let truth = ModelIndicator::from_active(5, &[1, 2]);
        let sel = ModelIndicator::from_active(5, &[1, 4]);
        assert_eq!(selection_rates(&sel, &truth), (0.5, 0.5));
        assert_eq!(selection_rates(&truth, &truth), (1.0, 1.0));
    }

    #[test]
    fn columns_do_not_depend_on_p() {
        let tree = SeedTree::new(3);
        let a = gen_covariates(50, 4, 0.5, &tree);
        let b = gen_covariates(50, 9, 0.5, &tree);
        assert_eq!(a.columns(0, 5), b.columns(0, 5));
    }

    #[test]
    fn replication_is_deterministic() {
        let c = ScenarioConfig::new(OutcomeModel::M2, 0.5, 5);
        let a = generate_replication(&c, 4).unwrap();
        let b = generate_replication(&c, 4).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.y_full, b.y_full);
        let other = generate_replication(&c, 5).unwrap();
        assert_ne!(a.y_full, other.y_full);
    }

    #[test]
    fn config_validation() {
        let mut c = ScenarioConfig::new(OutcomeModel::M2, 0.0, 3);
        assert!(c.validate().is_err());
        c.p = 4;
        assert!(c.validate().is_ok());
        c.rho = 1.0;
        assert!(c.validate().is_err());
    }
}
