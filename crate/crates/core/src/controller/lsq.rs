//! Batch policy evaluation: least-squares fit of the critic weights to the
//! approximate Hamiltonian, which is linear in the weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest Gram-matrix condition number accepted by [`policy_evaluation_lsq`].
pub const MAX_GRAM_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct LsqFit {
    pub weights: DVector<f64>,
    /// Condition number of `sum sigma sigma^T`.
    pub gram_condition: f64,
    /// Mean of `(sigma^T theta + r)^2` at the fitted weights.
    pub mean_squared_residual: f64,
}

/// Minimizes `sum_k (sigma_k^T theta + r_k)^2`, i.e.
/// `theta = -(sum sigma sigma^T)^{-1} sum sigma r`.
///
/// Solved through an SVD of the stacked regressor rather than the normal
/// equations.
pub fn policy_evaluation_lsq(samples: &[(DVector<f64>, f64)]) -> Result<LsqFit> {
    let m = samples
        .first()
        .map(|(s, _)| s.len())
        .ok_or_else(|| Error::InsufficientExcitation("no samples".into()))?;
    if samples.len() < m {
        return Err(Error::InsufficientExcitation(format!(
            "{} samples for {m} weights",
            samples.len()
        )));
    }
    if let Some((s, _)) = samples.iter().find(|(s, _)| s.len() != m) {
        return Err(Error::dims("sigma sample", m, s.len()));
    }
    let k = samples.len();
    let stacked = DMatrix::from_fn(k, m, |row, col| samples[row].0[col]);
    let rhs = DVector::from_fn(k, |row, _| -samples[row].1);

    let svd = stacked.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_min > 0.0) || !s_max.is_finite() {
        return Err(Error::InsufficientExcitation("regressor is rank deficient".into()));
    }
    let gram_condition = (s_max / s_min).powi(2);
    if gram_condition > MAX_GRAM_CONDITION {
        return Err(Error::InsufficientExcitation(format!(
            "Gram matrix condition number {gram_condition:.3e}"
        )));
    }
    let weights = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::InsufficientExcitation(e.to_string()))?;
    let residual = &stacked * &weights - &rhs;
    Ok(LsqFit {
        mean_squared_residual: residual.norm_squared() / k as f64,
        weights,
        gram_condition,
    })
}
