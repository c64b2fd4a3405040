//! Self-normalized importance-sampling estimators, all in log space.

use crate::ad::log_sum_exp;
use crate::error::{Error, Result};

/// `log Ẑ = logsumexp(log w) - log K`.
pub fn is_normalizer(log_weights: &[f64]) -> Result<f64> {
    if log_weights.is_empty() {
        return Err(Error::EmptySamples);
    }
    Ok(log_sum_exp(log_weights) - (log_weights.len() as f64).ln())
}

/// Normalized weights `w̄_k = w_k / Σ_j w_j`. Samples at `-inf` get zero.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::EmptySamples);
    }
    let lse = log_sum_exp(log_weights);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    if !lse.is_finite() {
        return Err(Error::NonFinite {
            op: "normalized_weights",
        });
    }
    Ok(log_weights.iter().map(|lw| (lw - lse).exp()).collect())
}

/// `Î = Σ_k w̄_k f(z_k)`.
pub fn is_expectation(log_weights: &[f64], f_values: &[f64]) -> Result<f64> {
    if log_weights.len() != f_values.len() {
        return Err(Error::LengthMismatch(log_weights.len(), f_values.len()));
    }
    let w = normalized_weights(log_weights)?;
    Ok(w.iter()
        .zip(f_values)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, f)| w * f)
        .sum())
}

/// Effective sample size `1 / Σ w̄²`.
pub fn effective_sample_size(log_weights: &[f64]) -> Result<f64> {
    let w = normalized_weights(log_weights)?;
    Ok(1.0 / w.iter().map(|w| w * w).sum::<f64>())
}
