//! Dense linear algebra, reproducible random streams and multivariate Gaussians.

mod gaussian;
mod matrix;
mod rng;

pub use gaussian::{
    cholesky, gaussian_logpdf, regularize_covariance, sample_gaussian, sample_standard_normals,
    GaussianParams, MIN_RIDGE, RIDGE_SCALE,
};
pub use matrix::Matrix;
pub use rng::RngStream;

/// `log Σ exp(v_i)` with max-subtraction. Returns `-inf` for an empty slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_of_zeros_is_ln2() {
        assert!((logsumexp(&[0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_shift_identity() {
        let v = [0.3, -1.2, 4.0, 2.5];
        for c in [-50.0, -1.0, 0.0, 3.5, 700.0] {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            assert!((logsumexp(&shifted) - logsumexp(&v) - c).abs() < 1e-12);
        }
    }
}
