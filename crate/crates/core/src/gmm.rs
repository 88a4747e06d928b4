//! Over-identified estimating system for the optimal sparse PS estimator and
//! its two-step GMM solution.
//!
//! For an augmented support `u*` with active columns `x_a` (q of them,
//! intercept included) and `zeta = (phi_a, theta)` the per-unit estimating
//! function stacks
//!
//! ```text
//! delta/pi (y - theta)          (1)
//! (delta - pi) x_a              (q)
//! (delta/pi - 1) x_a            (q, calibration block)
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{link_logistic, Dataset, ModelIndicator};

pub const GMM_MAX_ITER: usize = 200;
pub const GMM_TOL: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e12;
const MAX_HALVINGS: usize = 40;

/// Stacked estimating equations on a fixed augmented support.
#[derive(Debug, Clone)]
pub struct OptSystem<'a> {
    data: &'a Dataset,
    u_star: ModelIndicator,
    xa: DMatrix<f64>,
    calibration: bool,
}

/// `U_opt` on the active columns of `u_star`.
pub fn build_u_opt<'a>(data: &'a Dataset, u_star: &ModelIndicator) -> Result<OptSystem<'a>> {
    if u_star.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: u_star.len(),
        });
    }
    let xa = data.x().select_columns(&u_star.active());
    Ok(OptSystem {
        data,
        u_star: u_star.clone(),
        xa,
        calibration: true,
    })
}

impl<'a> OptSystem<'a> {
    /// Drops the calibration block, leaving the just-identified PS system.
    pub fn without_calibration(mut self) -> Self {
        self.calibration = false;
        self
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn u_star(&self) -> &ModelIndicator {
        &self.u_star
    }

    /// Number of active covariates, intercept included.
    pub fn q(&self) -> usize {
        self.xa.ncols()
    }

    pub fn n_equations(&self) -> usize {
        1 + self.q() * if self.calibration { 2 } else { 1 }
    }

    pub fn n_params(&self) -> usize {
        self.q() + 1
    }

    fn probs(&self, zeta: &DVector<f64>) -> DVector<f64> {
        let phi = zeta.rows(0, self.q());
        (&self.xa * phi).map(link_logistic)
    }

    /// Per-unit estimating functions, one row per unit.
    pub fn unit_contributions(&self, zeta: &DVector<f64>) -> DMatrix<f64> {
        let q = self.q();
        let theta = zeta[q];
        let pi = self.probs(zeta);
        let delta = self.data.delta();
        let y = self.data.y_obs();
        let n = self.data.n();
        let mut g = DMatrix::zeros(n, self.n_equations());
        for i in 0..n {
            let inv = delta[i] / pi[i];
            g[(i, 0)] = inv * (y[i] - theta);
            let r = delta[i] - pi[i];
            let c = inv - 1.0;
            for k in 0..q {
                let x = self.xa[(i, k)];
                g[(i, 1 + k)] = r * x;
                if self.calibration {
                    g[(i, 1 + q + k)] = c * x;
                }
            }
        }
        g
    }

    /// Summed estimating equations `U_opt(zeta)`.
    pub fn equations(&self, zeta: &DVector<f64>) -> DVector<f64> {
        self.unit_contributions(zeta).row_sum().transpose()
    }

    /// Jacobian of [`Self::equations`] with respect to `zeta`.
    pub fn jacobian(&self, zeta: &DVector<f64>) -> DMatrix<f64> {
        let q = self.q();
        let theta = zeta[q];
        let pi = self.probs(zeta);
        let delta = self.data.delta();
        let y = self.data.y_obs();
        let n = self.data.n();

        let ipw_w = DVector::from_iterator(n, (0..n).map(|i| delta[i] / pi[i]));
        // d/dphi of delta/pi = -delta (1 - pi) / pi * x
        let dinv = DVector::from_iterator(n, (0..n).map(|i| -delta[i] * (1.0 - pi[i]) / pi[i]));
        let mut jac = DMatrix::zeros(self.n_equations(), q + 1);

        let row0 = self.xa.tr_mul(&DVector::from_iterator(
            n,
            (0..n).map(|i| dinv[i] * (y[i] - theta)),
        ));
        jac.view_mut((0, 0), (1, q)).copy_from(&row0.transpose());
        jac[(0, q)] = -ipw_w.sum();

        let info = linalg::weighted_gram(&self.xa, &pi.map(|p| -p * (1.0 - p)));
        jac.view_mut((1, 0), (q, q)).copy_from(&info);
        if self.calibration {
            let cal = linalg::weighted_gram(&self.xa, &dinv);
            jac.view_mut((1 + q, 0), (q, q)).copy_from(&cal);
        }
        jac
    }
}

/// Two-step GMM estimate with the quantities needed for its sampling law.
#[derive(Debug, Clone)]
pub struct GmmSolution {
    pub zeta: DVector<f64>,
    /// `n^-1 sum g_i g_i'` at the solution.
    pub sigma: DMatrix<f64>,
    /// `n^-1` times the Jacobian at the solution.
    pub gamma: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub ridge_events: usize,
    pub n: usize,
}

impl GmmSolution {
    /// Asymptotic covariance `n^-1 (Gamma' Sigma^-1 Gamma)^-1` of the estimator.
    pub fn covariance(&self) -> DMatrix<f64> {
        let prec = self
            .precision()
            .expect("GMM precision is positive definite");
        linalg::symmetrize(prec.inverse())
    }

    /// Cholesky factor of `n Gamma' Sigma^-1 Gamma`.
    pub fn precision(&self) -> Option<Cholesky<f64, Dyn>> {
        let (w, _) = weight_matrix(&self.sigma);
        let m = self.gamma.transpose() * w * &self.gamma * self.n as f64;
        Cholesky::new(linalg::symmetrize(m))
    }
}

/// Inverse of a second-moment matrix, adding a `1e-8 * trace` ridge when it is
/// too badly conditioned. Returns whether the ridge was used.
fn weight_matrix(sigma: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let condition = linalg::condition_number(sigma);
    let mut s = sigma.clone();
    let ridged = !(condition <= MAX_CONDITION);
    if ridged {
        let bump = 1e-8 * s.trace().max(f64::MIN_POSITIVE);
        for k in 0..s.nrows() {
            s[(k, k)] += bump;
        }
    }
    let inv = linalg::spd_inverse(&s).unwrap_or_else(|| linalg::sym_pinv(&s));
    (inv, ridged)
}

fn second_moment(system: &OptSystem, zeta: &DVector<f64>) -> DMatrix<f64> {
    let g = system.unit_contributions(zeta);
    linalg::symmetrize(g.transpose() * &g) / system.data.n() as f64
}

/// Minimizes `gbar' W gbar` with `W` the inverse second moment at `init`.
///
/// Steps are Newton steps on a Hessian obtained by differencing the analytic
/// gradient; where that Hessian is not positive definite the Gauss-Newton
/// matrix `Gamma' W Gamma` is used instead. Steps are halved until `Q` does
/// not increase.
pub fn gmm_solve(system: &OptSystem, init: &DVector<f64>) -> Result<GmmSolution> {
    if init.len() != system.n_params() {
        return Err(Error::DimensionMismatch {
            expected: system.n_params(),
            got: init.len(),
        });
    }
    let n = system.data.n() as f64;
    let (w, ridge0) = weight_matrix(&second_moment(system, init));
    let mut ridge_events = ridge0 as usize;

    let gbar = |z: &DVector<f64>| system.equations(z) / n;
    let objective = |g: &DVector<f64>| g.dot(&(&w * g));
    let gradient = |z: &DVector<f64>| -> (DMatrix<f64>, DVector<f64>) {
        let gamma = system.jacobian(z) / n;
        let grad = gamma.tr_mul(&(&w * gbar(z))) * 2.0;
        (gamma, grad)
    };

    let k = init.len();
    let mut zeta = init.clone();
    let mut q = objective(&gbar(&zeta));
    let mut iterations = 0;
    loop {
        let (gamma, grad) = gradient(&zeta);
        let residual = grad.amax();
        if residual < GMM_TOL {
            let sigma = second_moment(system, &zeta);
            if !(linalg::condition_number(&sigma) <= MAX_CONDITION) {
                ridge_events += 1;
            }
            return Ok(GmmSolution {
                zeta,
                sigma,
                gamma,
                objective: q,
                iterations,
                ridge_events,
                n: system.data.n(),
            });
        }
        if iterations == GMM_MAX_ITER {
            return Err(Error::NoConvergence {
                iterations,
                residual,
            });
        }
        iterations += 1;

        let mut hess = DMatrix::zeros(k, k);
        for j in 0..k {
            let h = 1e-6 * zeta[j].abs().max(1.0);
            let mut up = zeta.clone();
            let mut dn = zeta.clone();
            up[j] += h;
            dn[j] -= h;
            hess.set_column(j, &((gradient(&up).1 - gradient(&dn).1) / (2.0 * h)));
        }
        let step = match Cholesky::new(linalg::symmetrize(hess)) {
            Some(c) => -c.solve(&grad),
            None => {
                let gn = linalg::symmetrize(gamma.transpose() * &w * &gamma) * 2.0;
                match Cholesky::new(gn.clone()) {
                    Some(c) => -c.solve(&grad),
                    None => -(linalg::sym_pinv(&gn) * &grad),
                }
            }
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &zeta + &step * t;
            let cq = objective(&gbar(&cand));
            if cq.is_finite() && cq <= q {
                zeta = cand;
                q = cq;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            return Err(Error::NoConvergence {
                iterations,
                residual,
            });
        }
    }
}

/// Normal approximation to the posterior of `zeta` under a flat prior.
#[derive(Debug, Clone)]
pub struct ZetaPosterior {
    pub solution: GmmSolution,
    precision: Cholesky<f64, Dyn>,
}

impl ZetaPosterior {
    pub fn new(solution: GmmSolution) -> Result<Self> {
        let precision = solution.precision().ok_or(Error::SingularInformation {
            condition: f64::INFINITY,
        })?;
        Ok(Self {
            solution,
            precision,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.solution.zeta
    }
}

/// Sampler for `zeta | u*, U_opt`; the normal approximation is the default.
pub trait ZetaSampler {
    fn sample<R: Rng + ?Sized>(&self, posterior: &ZetaPosterior, rng: &mut R) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NormalApproximation;

impl ZetaSampler for NormalApproximation {
    fn sample<R: Rng + ?Sized>(&self, posterior: &ZetaPosterior, rng: &mut R) -> DVector<f64> {
        linalg::mvn_from_precision(&posterior.solution.zeta, &posterior.precision, rng)
    }
}

/// Solves the system from `init` and draws one `zeta`.
pub fn draw_zeta<R: Rng + ?Sized>(
    system: &OptSystem,
    init: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let post = ZetaPosterior::new(gmm_solve(system, init)?)?;
    Ok(NormalApproximation.sample(&post, rng))
}
