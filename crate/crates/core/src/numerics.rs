//! Log-domain helpers shared by the filter and the sampler.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Max-shifted `ln Σ exp(x_i)`. Returns `-inf` for an empty slice or when
/// every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalized weights `exp(x_i - lse(x))`.
pub fn normalize_log_weights(xs: &[f64]) -> Option<Vec<f64>> {
    let lse = log_sum_exp(xs);
    if !lse.is_finite() {
        return None;
    }
    Some(xs.iter().map(|&x| (x - lse).exp()).collect())
}

/// Effective sample size `(Σw)² / Σw²` from log weights.
pub fn ess_from_log_weights(xs: &[f64]) -> Option<f64> {
    let lse = log_sum_exp(xs);
    if !lse.is_finite() {
        return None;
    }
    let lse2 = log_sum_exp(&xs.iter().map(|&x| 2.0 * x).collect::<Vec<_>>());
    Some((2.0 * lse - lse2).exp())
}

pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    -0.5 * (LN_2PI + var.ln() + z * z / var)
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::Config(format!(
                "covariance is {}x{}, mean has dimension {dim}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 * (1.0 + cov.abs().max()) {
            return Err(Error::Numerical("covariance is not symmetric".into()));
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let chol_l = chol.l();
        let log_det: f64 = 2.0 * chol_l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_norm = -0.5 * (dim as f64 * LN_2PI + log_det);
        Ok(Gaussian { mean, chol_l, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol_l
    }

    /// Log density at the mode.
    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf_centered(&(DVector::from_column_slice(x) - &self.mean))
    }

    /// Log density of `mean + diff`.
    pub fn log_pdf_centered(&self, diff: &DVector<f64>) -> f64 {
        let z = self
            .chol_l
            .solve_lower_triangular(diff)
            .expect("cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }

    /// `mean + L z` for a standard-normal vector `z`.
    pub fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.chol_l * z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lse_handles_infinities() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_relative_eq!(log_sum_exp(&[0.0, f64::NEG_INFINITY]), 0.0);
        assert_relative_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln());
        assert_relative_eq!(log_sum_exp(&[-1000.0, -1000.0]), -1000.0 + 2f64.ln());
    }

    #[test]
    fn ess_of_textbook_weights() {
        let lw: Vec<f64> = [0.5f64, 0.25, 0.125, 0.125].iter().map(|w| w.ln()).collect();
        assert_relative_eq!(ess_from_log_weights(&lw).unwrap(), 32.0 / 11.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_matches_scalar_formula() {
        let g = Gaussian::new(DVector::from_vec(vec![1.0]), DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert_relative_eq!(g.log_pdf(&[0.3]), normal_log_pdf(0.3, 1.0, 2.0), epsilon = 1e-14);
        assert_relative_eq!(g.log_norm(), -0.5 * (LN_2PI + 2f64.ln()), epsilon = 1e-14);
    }

    #[test]
    fn gaussian_rejects_indefinite_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Gaussian::new(DVector::zeros(2), cov).is_err());
    }
}
