//! Acceptance runner: one PASS/FAIL line per criterion at desk scale
//! (B=200, 500/500 chains), then the scenario-level invariants.
//!
//! Exits nonzero when a check fails that is not in `KNOWN_BLOCKED`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use nalgebra::SymmetricEigen;
use rand::Rng;
use sparse_ps::baseline::{fit_propensity_mle, ps_point_estimate};
use sparse_ps::bsps::{
    inclusion_probability, laplace_covariance, penalized_mode, run_bsps_chain, theta_conditional,
};
use sparse_ps::gmm::{build_u_opt, gmm_solve};
use sparse_ps::model::{log_likelihood, score};
use sparse_ps::rng::{SeedTree, STREAM_BSPS};
use sparse_ps::simulation::{
    gen_covariates, gen_outcome, gen_response, generate_replication, run_monte_carlo, MetricsRow,
    MonteCarloOutput, OutcomeModel, ScenarioConfig,
};
use sparse_ps::{Method, ModelIndicator, PriorConfig, PropensityParams};

/// Checks whose failure has a recorded blocking analysis.
const KNOWN_BLOCKED: &[&str] = &["1c", "I4"];

struct Check {
    id: &'static str,
    pass: bool,
    text: String,
}

#[derive(Default)]
struct Log(Vec<Check>);

impl Log {
    fn check(&mut self, id: &'static str, pass: bool, text: String) {
        let tag = match (pass, KNOWN_BLOCKED.contains(&id)) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known)",
        };
        println!("{tag:<13} [{id}] {text}");
        self.0.push(Check { id, pass, text });
    }
}

fn scenario(model: OutcomeModel, rho: f64, p: usize, methods: &[Method]) -> MonteCarloOutput {
    let mut cfg = ScenarioConfig::new(model, rho, p);
    cfg.methods = methods.to_vec();
    cfg.bsps.burn_in = 500;
    cfg.bsps.kept = 500;
    cfg.obsps.burn_in = 500;
    cfg.obsps.kept = 500;
    let t = Instant::now();
    let out = run_monte_carlo(&cfg).expect("scenario runs");
    eprintln!("  {} done in {:.0?}", cfg.id(), t.elapsed());
    out
}

fn row(out: &MonteCarloOutput, m: Method) -> &MetricsRow {
    out.row(m).expect("method was run")
}

fn cp_in(r: &MetricsRow, lo: f64, hi: f64) -> (bool, String) {
    let cp = r.cp.unwrap_or(f64::NAN);
    (
        (lo..=hi).contains(&(cp * 100.0)),
        format!("{} CP {:.1} in [{lo}, {hi}]", r.method, cp * 100.0),
    )
}

/// Monte Carlo error of a sample SD from B replications.
fn sd_error(r: &MetricsRow) -> f64 {
    r.se.unwrap() / (2.0 * (r.n_converged as f64 - 1.0)).sqrt()
}

/// `a` below `b` by at least 0.002, or indistinguishable within 2 MC-errors.
fn ordered(a: &MetricsRow, b: &MetricsRow) -> bool {
    let (sa, sb) = (a.se.unwrap(), b.se.unwrap());
    let err = (sd_error(a).powi(2) + sd_error(b).powi(2)).sqrt();
    sb - sa >= 0.002 || (sb - sa).abs() <= 2.0 * err
}

fn criteria_1_2_6(log: &mut Log, m1: &MonteCarloOutput) {
    let bsps = row(m1, Method::Bsps);
    let (ok, text) = cp_in(bsps, 91.0, 98.0);
    log.check("1a", ok, format!("M1 p=10 {text}"));
    let tpr = bsps.tpr.unwrap();
    log.check(
        "1b",
        bsps.tnr.unwrap() >= 0.98,
        format!("M1 p=10 BSPS TNR {:.3} >= 0.98", bsps.tnr.unwrap()),
    );
    log.check(
        "1c",
        tpr == 1.0,
        format!("M1 p=10 BSPS TPR {tpr:.3} == 1.0"),
    );

    let (o, t) = (row(m1, Method::Obsps), row(m1, Method::Tps));
    let sds = format!(
        "SD OBSPS {:.4} < TPS {:.4} < BSPS {:.4}",
        o.se.unwrap(),
        t.se.unwrap(),
        bsps.se.unwrap()
    );
    log.check("2", ordered(o, t) && ordered(t, bsps), sds);

    for r in [bsps, o] {
        let ratio = r.mean_se_hat.unwrap() / r.se.unwrap();
        log.check(
            "6",
            (ratio - 1.0).abs() <= 0.20,
            format!("{} E[SE]/SE {ratio:.3} within 0.20 of 1", r.method),
        );
    }
}

fn criterion_5(log: &mut Log) {
    let reps = 50;
    let mut freqs = Vec::new();
    for n in [200, 800, 3200] {
        let mut cfg = ScenarioConfig::new(OutcomeModel::M1, 0.0, 10);
        cfg.n = n;
        let z0 = cfg.response_support();
        let priors = PriorConfig::default_for(11);
        let mut total = 0.0;
        for rep in 0..reps {
            let data = generate_replication(&cfg, rep).unwrap().dataset;
            let seed = SeedTree::new(cfg.seed).child_seed(&[rep, STREAM_BSPS]);
            let s = run_bsps_chain(&data, &priors, 500, 500, seed).unwrap();
            total += s.draws.iter().filter(|d| d.z == z0).count() as f64 / s.draws.len() as f64;
        }
        freqs.push(total / reps as f64);
    }
    let pass = freqs.windows(2).all(|w| w[1] >= w[0]) && freqs[2] >= 0.9;
    log.check(
        "5",
        pass,
        format!(
            "P(z = z0) at n=200/800/3200: {:.3} <= {:.3} <= {:.3}, last >= 0.9",
            freqs[0], freqs[1], freqs[2]
        ),
    );
}

fn criterion_7(log: &mut Log) {
    let t = Instant::now();
    let mut r = rng(70);

    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let data = toy(20 + 5 * k, 2 + k % 8, 700 + k as u64);
        let d = data.dim();
        let phi = PropensityParams::from_vec((0..d).map(|_| r.random_range(-1.0..1.0)).collect());
        let s = score(&data, &phi).unwrap();
        let h = 1e-5;
        for j in 0..d {
            let step = |e: f64| {
                let mut v = phi.as_vector().clone();
                v[j] += e;
                log_likelihood(&data, &PropensityParams(v)).unwrap()
            };
            let fd = (step(h) - step(-h)) / (2.0 * h);
            worst = worst.max((fd - s[j]).abs() / s.amax().max(1.0));
        }
    }
    log.check(
        "7a",
        worst < 1e-6,
        format!("score vs finite differences, max rel err {worst:.1e} < 1e-6"),
    );

    let mut spd = 0;
    for k in 0..100 {
        let (n, p) = if k % 2 == 0 {
            (12, 20 + k % 7)
        } else {
            (60, 3 + k % 9)
        };
        let data = toy(n, p, 800 + k as u64);
        let d = data.dim();
        let z = ModelIndicator::new((0..d).map(|_| r.random::<bool>()).collect());
        let priors = PriorConfig::default_for(d);
        let mode = penalized_mode(&data, &z, &priors).unwrap();
        let cov = laplace_covariance(&data, &mode, &z, &priors).unwrap();
        let sym = (&cov - cov.transpose()).amax() <= 1e-12 * cov.amax();
        if sym && SymmetricEigen::new(cov).eigenvalues.min() > 0.0 {
            spd += 1;
        }
    }
    log.check(
        "7b",
        spd == 100,
        format!("laplace_covariance SPD on {spd}/100 instances (half with p > n)"),
    );

    let p = beta_sigma_ks_p_values(5000);
    let min = p.iter().cloned().fold(1.0, f64::min);
    log.check(
        "7c",
        min > 0.01,
        format!("draw_beta_sigma vs conjugate sampler, min KS p {min:.3} > 0.01"),
    );

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let phi: f64 = r.random_range(-0.1..0.1);
        let w: f64 = r.random_range(0.05..0.95);
        let (nu0, nu1) = (1e-4, 1e4);
        let log_dens =
            |v: f64| -phi * phi / (2.0 * v) - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
        let log_odds = w.ln() + log_dens(nu1) - (1.0 - w).ln() - log_dens(nu0);
        let oracle = 1.0 / (1.0 + (-log_odds).exp());
        worst = worst.max((inclusion_probability(phi, w, nu0, nu1) - oracle).abs());
    }
    log.check(
        "7d",
        worst < 1e-12,
        format!("z-step probability vs log-space density ratio, max err {worst:.1e} < 1e-12"),
    );

    let data = toy(80, 4, 71);
    let phi = PropensityParams::from_vec(vec![0.8, 0.7, 0.0, 0.0, 0.0]);
    let cond = theta_conditional(&data, &phi, &ModelIndicator::from_active(5, &[1])).unwrap();
    let worst = [-2.0, -0.3, 0.0, 0.7, 3.1]
        .iter()
        .map(|&v| (cond.scaled_estimating_function(cond.theta_for(v)) - v).abs())
        .fold(0.0, f64::max);
    log.check(
        "7e",
        worst < 1e-10,
        format!("theta solve round trip, residual {worst:.1e} < 1e-10"),
    );

    let data = toy(150, 2, 72);
    let u = ModelIndicator::all(3);
    let mle = fit_propensity_mle(&data, &u).unwrap();
    let mut ps = mle.as_vector().clone().insert_row(3, 0.0);
    ps[3] = ps_point_estimate(&data, &mle).unwrap();
    let sys = build_u_opt(&data, &u).unwrap().without_calibration();
    let sol = gmm_solve(&sys, &ps.add_scalar(0.05)).unwrap();
    let gap = (&sol.zeta - &ps).amax();
    log.check(
        "7f",
        gap < 1e-6,
        format!("just-identified GMM vs plain PS, max gap {gap:.1e} < 1e-6"),
    );
    log.check(
        "7",
        t.elapsed().as_secs() < 60,
        format!("oracle suite in {:.1?} < 1 min", t.elapsed()),
    );
}

fn criterion_8(log: &mut Log) {
    let n = 1_000_000;
    for (k, model) in [OutcomeModel::M1, OutcomeModel::M2].into_iter().enumerate() {
        let x = gen_covariates(n, 4, 0.0, &SeedTree::new(80 + k as u64));
        let ybar = gen_outcome(model, &x, &mut rng(90 + k as u64)).mean();
        log.check(
            "8a",
            (ybar - 2.0).abs() < 0.01,
            format!("{model} theta0: mean of 1e6 outcomes {ybar:.4}, |. - 2| < 0.01"),
        );
    }
    let x = gen_covariates(n, 1, 0.0, &SeedTree::new(82));
    let rate = gen_response(&x, &mut rng(92))
        .iter()
        .filter(|&&d| d)
        .count() as f64
        / n as f64;
    let integral = expected_response_rate();
    log.check(
        "8b",
        (rate - 0.70).abs() <= 0.01 && (integral - 0.70).abs() <= 0.01,
        format!("response rate {rate:.4} (quadrature {integral:.4}) = 0.70 +- 0.01"),
    );
}

fn main() -> ExitCode {
    let mut log = Log::default();
    let all = [
        Method::Ps,
        Method::Tps,
        Method::Lasso,
        Method::Bsps,
        Method::Obsps,
    ];

    criterion_7(&mut log);
    criterion_8(&mut log);

    let m1_10 = scenario(OutcomeModel::M1, 0.0, 10, &all);
    criteria_1_2_6(&mut log, &m1_10);

    let m1_50 = scenario(
        OutcomeModel::M1,
        0.0,
        50,
        &[Method::Ps, Method::Tps, Method::Bsps],
    );
    let ps = row(&m1_50, Method::Ps);
    let cp = ps.cp.unwrap_or(f64::NAN) * 100.0;
    log.check("3a", cp <= 88.0, format!("M1 p=50 PS CP {cp:.1} <= 88"));
    let (ok, text) = cp_in(row(&m1_50, Method::Bsps), 91.0, 98.0);
    log.check("3b", ok, format!("M1 p=50 {text}"));

    let m1_100 = scenario(OutcomeModel::M1, 0.0, 100, &[Method::Ps, Method::Bsps]);
    let ps100 = row(&m1_100, Method::Ps);
    let frac = ps100.n_failed as f64 / (ps100.n_failed + ps100.n_converged) as f64;
    log.check(
        "3c",
        frac >= 0.5,
        format!("M1 p=100 PS non-convergence {:.0}% >= 50%", frac * 100.0),
    );
    let (ok, text) = cp_in(row(&m1_100, Method::Bsps), 91.0, 98.0);
    log.check("3d", ok, format!("M1 p=100 {text}"));

    let m2 = scenario(OutcomeModel::M2, 0.5, 50, &[Method::Bsps, Method::Obsps]);
    let (o, b) = (row(&m2, Method::Obsps), row(&m2, Method::Bsps));
    let (ok, text) = cp_in(o, 90.0, 98.0);
    log.check("4a", ok, format!("M2 rho=0.5 p=50 {text}"));
    log.check(
        "4b",
        o.se.unwrap() < b.se.unwrap(),
        format!(
            "M2 rho=0.5 p=50 SD OBSPS {:.4} < BSPS {:.4}",
            o.se.unwrap(),
            b.se.unwrap()
        ),
    );

    criterion_5(&mut log);

    // scenario-level invariants
    let (ps10, ps50) = (row(&m1_10, Method::Ps), row(&m1_50, Method::Ps));
    log.check(
        "I1",
        ps50.se.unwrap() >= 2.0 * ps10.se.unwrap(),
        format!(
            "PS SE p=50 {:.4} >= 2 x p=10 {:.4}",
            ps50.se.unwrap(),
            ps10.se.unwrap()
        ),
    );
    log.check(
        "I2",
        ps50.rbias.unwrap().abs() > ps10.rbias.unwrap().abs(),
        format!(
            "PS |Rbias| p=50 {:.4} > p=10 {:.4}",
            ps50.rbias.unwrap().abs(),
            ps10.rbias.unwrap().abs()
        ),
    );
    let (bsps, tps) = (row(&m1_10, Method::Bsps), row(&m1_10, Method::Tps));
    log.check(
        "I3",
        bsps.mean_se_hat.unwrap() > tps.se.unwrap(),
        format!(
            "BSPS E[SE] {:.4} > TPS SE {:.4}",
            bsps.mean_se_hat.unwrap(),
            tps.se.unwrap()
        ),
    );
    log.check(
        "I4",
        tps.se.unwrap() <= ps10.se.unwrap(),
        format!(
            "TPS SD {:.4} <= PS SD {:.4} at p=10",
            tps.se.unwrap(),
            ps10.se.unwrap()
        ),
    );
    let tps50 = row(&m1_50, Method::Tps);
    log.check(
        "I5",
        tps50.se == tps.se && tps50.cp == tps.cp && tps50.rbias == tps.rbias,
        "TPS metrics identical at p=10 and p=50".to_string(),
    );

    let failed: Vec<&Check> = log.0.iter().filter(|c| !c.pass).collect();
    let unexpected: Vec<&&Check> = failed
        .iter()
        .filter(|c| !KNOWN_BLOCKED.contains(&c.id))
        .collect();
    println!(
        "\n{} checks: {} passed, {} failed ({} known)",
        log.0.len(),
        log.0.len() - failed.len(),
        failed.len(),
        failed.len() - unexpected.len()
    );
    for c in &unexpected {
        println!("unexpected failure: [{}] {}", c.id, c.text);
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
