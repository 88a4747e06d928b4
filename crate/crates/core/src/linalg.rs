//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

/// `sum_i w_i x_i x_i'` over the rows of `x`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = x.clone();
    for mut col in scaled.column_iter_mut() {
        col.component_mul_assign(w);
    }
    let g = x.transpose() * scaled;
    symmetrize(g)
}

/// Averages a matrix with its transpose to remove rounding asymmetry.
pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix; `inf` when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
            (lo.min(v.abs()), hi.max(v.abs()))
        });
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Inverse of a symmetric positive definite matrix, or `None` when Cholesky fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(m.clone()).map(|c| symmetrize(c.inverse()))
}

/// Moore-Penrose inverse of a symmetric matrix via its eigendecomposition.
pub fn sym_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let tol = eig.eigenvalues.amax() * 1e-12 * m.nrows() as f64;
    let inv = eig
        .eigenvalues
        .map(|v| if v.abs() > tol { 1.0 / v } else { 0.0 });
    let q = &eig.eigenvectors;
    symmetrize(q * DMatrix::from_diagonal(&inv) * q.transpose())
}

/// One draw from `N(mean, (L L')^-1)` given the Cholesky factor `L` of the precision.
pub fn mvn_from_precision<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    precision: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let eps = standard_normals(mean.len(), rng);
    let l = precision.l();
    let offset = l
        .transpose()
        .solve_upper_triangular(&eps)
        .expect("Cholesky factor has a positive diagonal");
    mean + offset
}

/// One draw from `N(mean, L L')` given the Cholesky factor `L` of the covariance.
pub fn mvn_from_covariance<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    covariance: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let eps = standard_normals(mean.len(), rng);
    mean + covariance.l() * eps
}

pub fn standard_normals<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)))
}
