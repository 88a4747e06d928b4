//! Helpers shared by the oracle and acceptance targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use sparse_ps::model::link_logistic;
use sparse_ps::obsps::draw_beta_sigma;
use sparse_ps::{Dataset, ModelIndicator, PriorConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn corr(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let sa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let sb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (sa * sb).sqrt()
}

/// Two-sample Kolmogorov-Smirnov p-value (asymptotic distribution).
pub fn ks_p_value(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let q: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    q.clamp(0.0, 1.0)
}

pub fn sample_cov(draws: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let m = draws.len() as f64;
    let d = draws[0].len();
    let mu = draws.iter().fold(DVector::zeros(d), |acc, x| acc + x) / m;
    let cov = draws.iter().fold(DMatrix::zeros(d, d), |acc, x| {
        let c = x - &mu;
        acc + &c * c.transpose()
    }) / (m - 1.0);
    (mu, cov)
}

pub fn frobenius_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Small response-model dataset with a linear outcome; `p >= 2`.
pub fn toy(n: usize, p: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let cov = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let mut y = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let pi = link_logistic(0.8 + 0.7 * cov[(i, 0)]);
        let d = r.random::<f64>() < pi;
        let yi = 1.0 + 2.0 * cov[(i, 0)] + 0.5 * cov[(i, 1)] + r.sample::<f64, _>(StandardNormal);
        delta.push(d);
        y.push(d.then_some(yi));
    }
    Dataset::with_intercept(&cov, y, delta).unwrap()
}

/// `E[logistic(1 + Z)]` by the trapezoid rule on `[-12, 12]`.
pub fn expected_response_rate() -> f64 {
    let steps = 200_000;
    let h = 24.0 / steps as f64;
    (0..=steps)
        .map(|k| {
            let z = -12.0 + k as f64 * h;
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            w * (-z * z / 2.0).exp()
                / (2.0 * std::f64::consts::PI).sqrt()
                / (1.0 + (-(1.0 + z)).exp())
        })
        .sum::<f64>()
        * h
}

/// KS p-values of `draw_beta_sigma` against an independent
/// normal-inverse-gamma conditional sampler built from the textbook formulas
/// with an explicit covariance inverse: one per beta coordinate, then sigma^2.
pub fn beta_sigma_ks_p_values(m: usize) -> Vec<f64> {
    let data = toy(80, 3, 1);
    let d = data.dim();
    let u = ModelIndicator::from_active(d, &[1, 2]);
    let priors = PriorConfig::default_for(d);
    let sigma2_prev = 1.3;

    let mut r = rng(2);
    let ours: Vec<_> = (0..m)
        .map(|_| draw_beta_sigma(&data, &u, sigma2_prev, &priors, &mut r).unwrap())
        .collect();
    assert!(ours.iter().all(|s| s.u == u));

    let rows: Vec<usize> = (0..data.n()).filter(|&i| data.responded(i)).collect();
    let xr = data.x().select_rows(&rows);
    let yr = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.y(i).unwrap()));
    let prior_var = priors.beta_prior_variances(&u);
    let mut prec = xr.transpose() * &xr / sigma2_prev;
    for j in 0..d {
        prec[(j, j)] += 1.0 / prior_var[j];
    }
    let v_star = prec.try_inverse().unwrap();
    let mu_star = &v_star * (xr.transpose() * &yr) / sigma2_prev;
    let l = v_star.clone().cholesky().unwrap().l();
    let r_count = rows.len() as f64;
    let chi = ChiSquared::new(2.0 * (priors.c1 + r_count / 2.0)).unwrap();
    let mut r = rng(3);
    let theirs: Vec<(DVector<f64>, f64)> = (0..m)
        .map(|_| {
            let e = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
            let beta = &mu_star + &l * e;
            let rss = (&yr - &xr * &beta).norm_squared();
            (beta, 2.0 * (priors.c2 + rss / 2.0) / chi.sample(&mut r))
        })
        .collect();

    let mut p: Vec<f64> = (0..d)
        .map(|j| {
            let a: Vec<f64> = ours.iter().map(|s| s.beta[j]).collect();
            let b: Vec<f64> = theirs.iter().map(|s| s.0[j]).collect();
            ks_p_value(&a, &b)
        })
        .collect();
    let a: Vec<f64> = ours.iter().map(|s| s.sigma2_e).collect();
    let b: Vec<f64> = theirs.iter().map(|s| s.1).collect();
    p.push(ks_p_value(&a, &b));
    p
}
