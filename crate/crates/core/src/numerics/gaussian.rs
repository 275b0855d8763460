use rand::Rng;
use rand_distr::StandardNormal;

use super::{Matrix, RngStream};
use crate::error::{Error, Result};

/// Relative ridge: `λ = RIDGE_SCALE · trace(Σ) / d`.
pub const RIDGE_SCALE: f64 = 1e-4;
/// Absolute lower bound on the ridge, so an all-zero covariance still factors.
pub const MIN_RIDGE: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multivariate normal with a cached lower Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    mean: Vec<f64>,
    covariance: Matrix,
    chol: Matrix,
    /// `−½·d·ln 2π − ln|L|`
    log_norm: f64,
}

impl GaussianParams {
    /// Factors `covariance` as given.
    pub fn new(mean: Vec<f64>, covariance: Matrix) -> Result<Self> {
        if covariance.rows() != mean.len() {
            return Err(Error::dims(mean.len(), covariance.rows()));
        }
        let chol = cholesky(&covariance)?;
        let d = mean.len();
        let log_det_half: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum();
        Ok(GaussianParams {
            log_norm: -0.5 * d as f64 * LN_2PI - log_det_half,
            mean,
            covariance,
            chol,
        })
    }

    /// Adds the ridge from [`regularize_covariance`] before factoring.
    pub fn regularized(mean: Vec<f64>, covariance: &Matrix) -> Result<Self> {
        GaussianParams::new(mean, regularize_covariance(covariance))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    /// `μ + L·z`
    pub(crate) fn transform(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let row = &self.chol.row(i)[..=i];
            out[i] = self.mean[i] + super::dot(row, &z[..=i]);
        }
    }

    /// `log 𝒩(x; μ, Σ)` expressed through the whitened squared radius `|z|²`.
    pub(crate) fn logpdf_from_radius2(&self, r2: f64) -> f64 {
        self.log_norm - 0.5 * r2
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis2(&self, x: &[f64]) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::dims(d, x.len()));
        }
        // forward substitution L z = x - μ
        let mut z = vec![0.0; d];
        for i in 0..d {
            let row = self.chol.row(i);
            let acc = super::dot(&row[..i], &z[..i]);
            z[i] = (x[i] - self.mean[i] - acc) / row[i];
        }
        Ok(super::dot(&z, &z))
    }
}

/// Returns `Σ + λI` with `λ = max(RIDGE_SCALE·trace(Σ)/d, MIN_RIDGE)`.
pub fn regularize_covariance(cov: &Matrix) -> Matrix {
    let d = cov.rows().max(1);
    let ridge = (RIDGE_SCALE * cov.trace() / d as f64).max(MIN_RIDGE);
    let mut out = cov.clone();
    for i in 0..cov.rows() {
        out[(i, i)] += ridge;
    }
    out
}

/// Lower-triangular `L` with `L·Lᵀ = cov`.
pub fn cholesky(cov: &Matrix) -> Result<Matrix> {
    let n = cov.rows();
    if cov.cols() != n {
        return Err(Error::dims(n, cov.cols()));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j);
        let pivot = cov[(j, j)] - super::dot(&lj[..j], &lj[..j]);
        if !(pivot > 0.0) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: pivot,
            });
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..n {
            let s = super::dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = (cov[(i, j)] - s) / diag;
        }
    }
    Ok(l)
}

pub fn gaussian_logpdf(x: &[f64], g: &GaussianParams) -> Result<f64> {
    let r2 = g.mahalanobis2(x)?;
    Ok(g.logpdf_from_radius2(r2))
}

/// `n·d` i.i.d. standard normals in row order.
pub fn sample_standard_normals(n: usize, d: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `n` rows drawn i.i.d. from `g`, each row as `μ + L·z`.
pub fn sample_gaussian(g: &GaussianParams, n: usize, rng: &mut RngStream) -> Matrix {
    let d = g.dim();
    let z = sample_standard_normals(n, d, rng);
    let mut out = Matrix::zeros(n, d);
    for r in 0..n {
        g.transform(&z[r * d..(r + 1) * d], out.row_mut(r));
    }
    out
}
